"""Policy interface, feature encoding and the FCFS baseline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .workload import Job

FEATURE_NAMES = ("job_size", "requested_time", "utilization", "job_wait")


class PolicyContractError(RuntimeError):
    """A policy was called with, or returned, something outside its contract."""


@dataclass(frozen=True)
class FeatureSpec:
    """Normalization caps frozen from the training trace.

    ``runtime_cap`` normalizes requested walltime, ``wait_cap`` the time a job
    has spent queued.  The wait feature is only emitted when ``with_wait``.
    """

    runtime_cap: float
    wait_cap: float = 1.0
    with_wait: bool = False

    def __post_init__(self):
        if self.runtime_cap <= 0 or self.wait_cap <= 0:
            raise ValueError("normalization caps must be positive")

    @property
    def dim(self) -> int:
        return 4 if self.with_wait else 3

    @property
    def names(self) -> tuple[str, ...]:
        return FEATURE_NAMES[: self.dim]


@dataclass
class Candidates:
    jobs: list[Job]
    submit: np.ndarray
    ids: np.ndarray
    features: np.ndarray | None = None

    def __len__(self):
        return len(self.jobs)


@dataclass
class Decision:
    """What a policy sees about the system besides the candidates."""

    clock: int
    queue_len: int
    phase: str  # "select" or "backfill"
    state: object


def utilization(state) -> float:
    return (state.total_nodes - state.free_nodes) / state.total_nodes


def encode_jobs(jobs, state, spec: FeatureSpec) -> np.ndarray:
    """Feature matrix (one row per job) at the current state of the cluster."""
    n = len(jobs)
    X = np.empty((n, spec.dim))
    X[:, 0] = [j.requested_procs for j in jobs]
    X[:, 0] /= state.total_nodes
    X[:, 1] = [j.requested_time for j in jobs]
    X[:, 1] /= spec.runtime_cap
    X[:, 2] = utilization(state)
    if spec.with_wait:
        X[:, 3] = [state.clock - j.submit_time for j in jobs]
        X[:, 3] /= spec.wait_cap
    np.clip(X, 0.0, 1.0, out=X)
    return X


def encode_features(job: Job, state, spec: FeatureSpec) -> np.ndarray:
    return encode_jobs([job], state, spec)[0]


def make_candidates(jobs, state, spec: FeatureSpec | None) -> Candidates:
    submit = np.array([j.submit_time for j in jobs], dtype=np.int64)
    ids = np.array([j.id for j in jobs], dtype=np.int64)
    feats = encode_jobs(jobs, state, spec) if spec is not None else None
    return Candidates(list(jobs), submit, ids, feats)


def fcfs_select(cands: Candidates) -> int:
    if len(cands) == 0:
        raise PolicyContractError("fcfs_select called with no candidates")
    return int(_kernels.earliest(cands.submit, cands.ids))


class Policy:
    """Base class for everything the simulator can ask to pick a job.

    ``in_order`` policies start jobs strictly in queue order and only pick
    among backfill candidates; window-based (agent) policies choose from the
    first ``window`` queued jobs in both phases.  ``feature_spec`` set to
    None skips feature encoding entirely.
    """

    name = "policy"
    in_order = False
    feature_spec: FeatureSpec | None = None

    def select(self, cands: Candidates, ctx: Decision) -> int:
        raise NotImplementedError

    def observe(self, state) -> None:
        """Hook called at every scheduling instance, before the pass."""

    def end_episode(self, state) -> None:
        """Hook called once the event queue drains."""


class FCFSPolicy(Policy):
    name = "fcfs"
    in_order = True

    def select(self, cands, ctx):
        return fcfs_select(cands)


class RandomPolicy(Policy):
    """Uniform choice among candidates; used for tests and sensitivity runs."""

    name = "random"

    def __init__(self, seed=0, feature_spec=None):
        self.rng = np.random.default_rng(seed)
        self.feature_spec = feature_spec

    def select(self, cands, ctx):
        return int(self.rng.integers(len(cands)))
