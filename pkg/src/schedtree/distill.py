"""Distilling the Q-network teacher into a regression tree with DAgger.

Every decision instant visited during a replay contributes one sample per
candidate job: its feature vector, the queue length at that instant and the
teacher's Q-value for it.  Only samples from critical instants (queue
longer than a threshold) are used to fit the tree.  A threshold of -1 keeps
everything, which gives the plain DAgger comparator.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .dqn import DQNModel, forward
from .dtree import FitConfig, FitError, Tree, fit_cart, mse
from .policies import FeatureSpec, Policy, PolicyContractError, fcfs_select
from .simcore import run_simulation

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 3
DEFAULT_ITERATIONS = 5


class FidelityUndefinedError(ValueError):
    pass


@dataclass
class Dataset:
    """Aggregated (features, queue_len, teacher_q) samples with the DAgger
    iteration that produced each one."""

    features: np.ndarray
    queue_len: np.ndarray
    teacher_q: np.ndarray
    iteration: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.teacher_q)
        if not (len(self.features) == len(self.queue_len) == len(self.iteration) == n):
            raise ValueError("dataset columns differ in length")

    def __len__(self):
        return len(self.teacher_q)

    @classmethod
    def empty(cls, dim: int, names=()) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0, dtype=np.int64), np.zeros(0),
                   np.zeros(0, dtype=np.int64), tuple(names))

    def union(self, other: "Dataset") -> "Dataset":
        return Dataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.queue_len, other.queue_len]),
            np.concatenate([self.teacher_q, other.teacher_q]),
            np.concatenate([self.iteration, other.iteration]),
            self.names or other.names,
        )

    def subset(self, mask) -> "Dataset":
        return Dataset(self.features[mask], self.queue_len[mask], self.teacher_q[mask],
                       self.iteration[mask], self.names)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = self.names or tuple(f"x{i}" for i in range(self.features.shape[1]))
        w.writerow([*names, "queue_len", "teacher_q", "iteration"])
        for x, ql, q, it in zip(self.features, self.queue_len, self.teacher_q, self.iteration):
            w.writerow([*(repr(float(v)) for v in x), int(ql), repr(float(q)), int(it)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "Dataset":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        d = len(header) - 3
        arr = np.array(body, dtype=float).reshape(-1, len(header))
        return cls(arr[:, :d].copy(), arr[:, d].astype(np.int64), arr[:, d + 1].copy(),
                   arr[:, d + 2].astype(np.int64), tuple(header[:d]))


@dataclass
class DecisionRecord:
    features: np.ndarray
    submit: np.ndarray
    ids: np.ndarray
    queue_len: int
    teacher_q: np.ndarray
    chosen: int


class _Recorder(Policy):
    """Wraps the acting policy and logs every decision with teacher labels."""

    def __init__(self, inner: Policy, teacher: DQNModel):
        if inner.feature_spec is not None and inner.feature_spec != teacher.spec:
            raise ValueError("acting policy and teacher disagree on feature normalization")
        self.inner = inner
        self.teacher = teacher
        self.feature_spec = teacher.spec
        self.in_order = inner.in_order
        self.name = inner.name
        self.records: list[DecisionRecord] = []

    def select(self, cands, ctx):
        idx = self.inner.select(cands, ctx)
        q = forward(self.teacher.net, cands.features)
        self.records.append(DecisionRecord(cands.features, cands.submit, cands.ids, ctx.queue_len, q, int(idx)))
        return idx

    def observe(self, state):
        self.inner.observe(state)

    def end_episode(self, state):
        self.inner.end_episode(state)


def replay_decisions(policy: Policy, teacher: DQNModel, trace, total_nodes: int, window: int = 20):
    rec = _Recorder(policy, teacher)
    run_simulation(trace, rec, total_nodes, window)
    return rec.records


def to_dataset(records, iteration: int, names=()) -> Dataset:
    if not records:
        return Dataset.empty(0 if not names else len(names), names)
    feats = np.vstack([r.features for r in records])
    ql = np.concatenate([np.full(len(r.features), r.queue_len, dtype=np.int64) for r in records])
    q = np.concatenate([r.teacher_q for r in records])
    return Dataset(feats, ql, q, np.full(len(q), iteration, dtype=np.int64), tuple(names))


def collect_trajectory(policy: Policy, teacher: DQNModel, trace, total_nodes: int, window: int = 20,
                       iteration: int = 0) -> Dataset:
    """Replay ``trace`` under ``policy``; label every candidate of every
    decision with the teacher's Q-value."""
    records = replay_decisions(policy, teacher, trace, total_nodes, window)
    return to_dataset(records, iteration, teacher.spec.names)


def filter_critical(data: Dataset, threshold: int) -> Dataset:
    """Samples whose queue length exceeds ``threshold`` (strictly)."""
    return data.subset(data.queue_len > threshold)


# -- the student policy ----------------------------------------------------------

class IRLPolicy(Policy):
    """Tree policy.  In critical states (queue longer than ``threshold``) it
    starts the candidate with the highest predicted Q; otherwise it falls
    back to FCFS among the candidates, unless ``fallback == "tree"``."""

    def __init__(self, tree: Tree, spec: FeatureSpec, threshold: int = DEFAULT_THRESHOLD,
                 fallback: str = "fcfs"):
        if fallback not in ("fcfs", "tree"):
            raise ValueError("fallback must be 'fcfs' or 'tree'")
        if tree.n_features != spec.dim:
            raise ValueError("tree and feature spec dimensions differ")
        self.tree = tree
        tree.row_function()  # build now, not inside the first timed decision
        self.feature_spec = spec
        self.threshold = threshold
        self.fallback = fallback
        self.name = "dagger" if threshold < 0 else "irl"

    def select(self, cands, ctx):
        return irl_select(self, cands, ctx.queue_len)


def irl_select(policy: IRLPolicy, cands, queue_len: int) -> int:
    if len(cands) == 0:
        raise PolicyContractError("irl_select called with no candidates")
    if queue_len > policy.threshold or policy.fallback == "tree":
        return policy.tree.pick(cands.features, cands.submit, cands.ids)
    return fcfs_select(cands)


def fidelity(tree: Tree, teacher: DQNModel, trace=None, total_nodes: int | None = None, window: int = 20,
             threshold: int = DEFAULT_THRESHOLD, records=None, min_candidates: int = 2) -> float:
    """Fraction of critical teacher decisions where the tree picks the same job.

    The trace is replayed under the greedy teacher; decisions with fewer than
    ``min_candidates`` candidates carry no choice and are skipped.  Pass
    ``records`` from :func:`replay_decisions` to skip the replay.
    """
    if records is None:
        records = replay_decisions(teacher.policy(), teacher, trace, total_nodes, window)
    agree = total = 0
    for r in records:
        if r.queue_len <= threshold or len(r.features) < min_candidates:
            continue
        total += 1
        agree += tree.argmax(r.features, r.submit, r.ids) == r.chosen
    if total == 0:
        raise FidelityUndefinedError("no critical decisions to compare")
    return agree / total


# -- DAgger ----------------------------------------------------------------------

@dataclass
class DistillResult:
    policy: IRLPolicy
    report: list[dict]
    dataset: Dataset
    trees: list[Tree] = field(repr=False, default_factory=list)

    @property
    def tree(self) -> Tree:
        return self.policy.tree

    @property
    def method(self) -> str:
        return "DAgger" if self.policy.threshold < 0 else "IRL"

    def report_csv(self) -> str:
        buf = io.StringIO()
        cols = ["iteration", "method", "threshold", "max_depth", "dataset_size", "train_samples",
                "tree_nodes", "tree_leaves", "train_mse", "fidelity"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in self.report:
            w.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()


def dagger_train(teacher: DQNModel, trace, total_nodes: int, n_iter: int = DEFAULT_ITERATIONS,
                 fit_cfg: FitConfig = FitConfig(), threshold: int = DEFAULT_THRESHOLD, window: int = 20,
                 keep: str = "last", fallback: str = "fcfs") -> DistillResult:
    """DAgger with critical-state filtering.

    ``keep="best"`` returns the iteration with the highest training-trace
    fidelity instead of the last one.
    """
    if n_iter < 1:
        raise ValueError("n_iter must be >= 1")
    if keep not in ("last", "best"):
        raise ValueError("keep must be 'last' or 'best'")
    names = teacher.spec.names
    teacher_records = replay_decisions(teacher.policy(), teacher, trace, total_nodes, window)
    data = to_dataset(teacher_records, 0, names)

    report, trees, policies = [], [], []
    for i in range(1, n_iter + 1):
        crit = filter_critical(data, threshold)
        if len(crit) == 0:
            raise FitError(f"iteration {i}: no critical samples (threshold {threshold})")
        tree = fit_cart(crit.features, crit.teacher_q, fit_cfg)
        student = IRLPolicy(tree, teacher.spec, threshold, fallback)
        try:
            fid = fidelity(tree, teacher, records=teacher_records, threshold=threshold)
        except FidelityUndefinedError:
            fid = float("nan")
        new = collect_trajectory(student, teacher, trace, total_nodes, window, iteration=i)
        data = data.union(new)
        report.append({
            "iteration": i,
            "method": "DAgger" if threshold < 0 else "IRL",
            "threshold": threshold,
            "max_depth": fit_cfg.max_depth,
            "dataset_size": len(data),
            "train_samples": len(crit),
            "tree_nodes": tree.n_nodes,
            "tree_leaves": tree.n_leaves,
            "train_mse": mse(tree, crit.features, crit.teacher_q),
            "fidelity": fid,
        })
        log.info("iteration %d: %d samples, %d nodes, fidelity %.3f", i, len(crit), tree.n_nodes, fid)
        trees.append(tree)
        policies.append(student)

    pick = len(policies) - 1
    if keep == "best":
        fids = [np.nan_to_num(r["fidelity"], nan=-1.0) for r in report]
        pick = int(np.argmax(fids))
    return DistillResult(policies[pick], report, data, trees)
