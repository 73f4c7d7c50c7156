"""Per-job Q-network teacher: MLP, rewards, epsilon-greedy, replay Q-learning.

The network scores one job at a time: input is the job's feature vector
(size, requested time, utilization[, wait]), output a scalar Q-value.  At
each decision the candidate with the highest Q is started.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .policies import FCFSPolicy, FeatureSpec, Policy, PolicyContractError
from .simcore import run_simulation

HIDDEN = (32, 16, 8)
MODEL_MAGIC = "schedtree-qnet"
MODEL_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class ModelFormatError(ValueError):
    pass


@dataclass
class QNetwork:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def d_in(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def copy(self) -> "QNetwork":
        return QNetwork([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def params(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def init_network(d_in: int, rng, hidden=HIDDEN) -> QNetwork:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    sizes = [d_in, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return QNetwork(weights, biases)


def forward(net: QNetwork, f):
    """Q-value of one feature vector (returns float) or of each row of a matrix."""
    x = np.asarray(f, dtype=float)
    single = x.ndim == 1
    if x.shape[-1] != net.d_in:
        raise ValueError(f"expected {net.d_in} features, got {x.shape[-1]}")
    h = x.reshape(1, -1) if single else x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w
        h += b
        if i < last:
            np.maximum(h, 0.0, out=h)
    q = h[:, 0]
    return float(q[0]) if single else q


def td_loss_and_grads(net: QNetwork, X: np.ndarray, y: np.ndarray):
    """Loss 0.5 * mean((Q(X) - y)^2) and its gradient for every parameter.

    Gradients are returned in ``net.params()`` order (W0, b0, W1, b1, ...).
    """
    acts = [X]
    h = X
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    err = acts[-1][:, 0] - y
    n = X.shape[0]
    loss = 0.5 * float(np.mean(err * err))

    grads = [None] * (2 * len(net.weights))
    delta = (err / n)[:, None]
    for i in range(last, -1, -1):
        grads[2 * i] = acts[i].T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (acts[i] > 0)
    return loss, grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- rewards -----------------------------------------------------------------

def _split(a):
    c = 134217729.0 * a  # 2**27 + 1
    hi = c - (c - a)
    return hi, a - hi


def _quotients(a, b):
    """Terms whose exact sum is a/b to about twice double precision:
    the rounded quotient plus its error-free residual divided by b."""
    q = a / b
    p = b * q
    bh, bl = _split(b)
    qh, ql = _split(q)
    p_err = ((bh * qh - p) + bh * ql + bl * qh) + bl * ql  # b*q == p + p_err exactly
    return np.concatenate([q, ((a - p) - p_err) / b])


def reward_A(runtimes) -> float:
    """Sum of -1/t_j over the jobs in the system, correctly rounded."""
    t = np.asarray(runtimes, dtype=float)
    if t.size == 0:
        return 0.0
    if np.any(t <= 0):
        raise ValueError("runtimes must be positive")
    return -math.fsum(_quotients(np.ones_like(t), t))


def reward_I(jobs) -> float:
    """Sum of -(w_j + t_j)/t_j over (t_j, w_j) pairs: negative total slowdown."""
    if len(jobs) == 0:
        return 0.0
    arr = np.asarray(jobs, dtype=float).reshape(-1, 2)
    t, w = arr[:, 0], arr[:, 1]
    if np.any(t <= 0) or np.any(w < 0):
        raise ValueError("need t_j > 0 and w_j >= 0")
    return -math.fsum([float(len(t)), *_quotients(w, t)])


def system_reward(state, kind: str) -> float:
    """Reward of the current snapshot over all waiting and running jobs."""
    running = state.running.values()
    if kind == "A":
        ts = [j.runtime for j in state.queue]
        ts += [r.job.runtime for r in running]
        return reward_A(ts)
    if kind == "I":
        pairs = [(j.runtime, state.clock - j.submit_time) for j in state.queue]
        pairs += [(r.job.runtime, r.start - r.job.submit_time) for r in running]
        return reward_I(pairs)
    raise ValueError(f"unknown reward kind {kind!r}")


# -- configuration and exploration --------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    window: int = 20
    epsilon0: float = 1.0
    alpha: float = 0.995
    epsilon_floor: float = 0.01
    gamma: float = 0.99
    episodes: int = 50
    replay_capacity: int = 50_000
    batch_size: int = 64
    learning_rate: float = 1e-3
    target_sync: int = 500
    reward: str = "A"
    reward_scale: float | None = None
    with_wait: bool | None = None
    hidden: tuple[int, ...] = HIDDEN
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must be in (0, 1]")
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if self.reward not in ("A", "I"):
            raise ValueError("reward must be 'A' or 'I'")
        if self.episodes < 0 or self.batch_size < 1 or self.replay_capacity < self.batch_size:
            raise ValueError("bad episodes / batch_size / replay_capacity")
        if self.window < 1 or self.target_sync < 1:
            raise ValueError("window and target_sync must be >= 1")

    @property
    def scale(self) -> float:
        """Reward multiplier.  Reward I sums slowdowns, which run two orders
        of magnitude above reward A, so it is scaled down by default."""
        if self.reward_scale is not None:
            return self.reward_scale
        return 1.0 if self.reward == "A" else 0.01

    @property
    def use_wait(self) -> bool:
        return self.reward == "I" if self.with_wait is None else self.with_wait


def epsilon_at(k: int, cfg: TrainConfig) -> float:
    """Exploration rate for episode ``k``: epsilon0 * alpha**k, floored."""
    if k < 0:
        raise ValueError("k must be non-negative")
    return max(cfg.epsilon0 * cfg.alpha ** k, cfg.epsilon_floor)


def greedy(net: QNetwork, features, submit, ids) -> int:
    return int(_kernels.argmax_tiebreak(forward(net, features), submit, ids))


def act(net: QNetwork, features, submit, ids, epsilon: float, rng) -> int:
    """Epsilon-greedy choice among candidate rows of ``features``."""
    n = len(features)
    if n == 0:
        raise PolicyContractError("act called with no candidates")
    if epsilon > 0 and rng.random() < epsilon:
        return int(rng.integers(n))
    return greedy(net, np.asarray(features, dtype=float), np.asarray(submit, dtype=np.int64),
                  np.asarray(ids, dtype=np.int64))


# -- replay and learning -----------------------------------------------------

class ReplayBuffer:
    """Ring buffer of transitions.  The next-state candidate set is stored
    padded to ``window`` rows together with its true size."""

    def __init__(self, capacity: int, dim: int, window: int):
        self.capacity = capacity
        self.x = np.zeros((capacity, dim))
        self.r = np.zeros(capacity)
        self.done = np.zeros(capacity, dtype=bool)
        self.nx = np.zeros((capacity, window, dim))
        self.nn = np.zeros(capacity, dtype=np.int64)
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def push(self, x, r, next_feats):
        i = self.pos
        self.x[i] = x
        self.r[i] = r
        n = 0 if next_feats is None else len(next_feats)
        self.done[i] = n == 0
        self.nn[i] = n
        if n:
            self.nx[i, :n] = next_feats
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch: int, rng):
        idx = rng.integers(0, self.size, size=batch)
        return self.x[idx], self.r[idx], self.done[idx], self.nx[idx], self.nn[idx]


class _Pending:
    __slots__ = ("x", "r", "next", "terminal")

    def __init__(self, x):
        self.x = x
        self.r = None
        self.next = None
        self.terminal = False

    @property
    def complete(self):
        return self.r is not None and (self.next is not None or self.terminal)


class DQNLearner(Policy):
    """Training-mode policy: acts epsilon-greedily and learns online.

    The reward of a decision is the system reward observed at the next
    scheduling instance; its next state is the candidate set of the next
    decision (empty at the end of an episode).
    """

    name = "dqn-train"

    def __init__(self, net: QNetwork, spec: FeatureSpec, cfg: TrainConfig, rng):
        self.net = net
        self.target = net.copy()
        self.feature_spec = spec
        self.cfg = cfg
        self.rng = rng
        self.replay = ReplayBuffer(cfg.replay_capacity, spec.dim, cfg.window)
        self.opt = Adam(net.params(), lr=cfg.learning_rate)
        self.epsilon = cfg.epsilon0
        self.updates = 0
        self._open: list[_Pending] = []
        self._last: _Pending | None = None
        self._rewards: list[float] = []
        self._losses: list[float] = []

    def begin_episode(self, epsilon: float):
        self.epsilon = epsilon
        self._open, self._last = [], None
        self._rewards, self._losses = [], []

    def _flush(self):
        keep = []
        for p in self._open:
            if p.complete:
                self.replay.push(p.x, p.r, None if p.terminal else p.next)
            else:
                keep.append(p)
        self._open = keep

    def observe(self, state):
        if not any(p.r is None for p in self._open):
            return
        r = self.cfg.scale * system_reward(state, self.cfg.reward)
        for p in self._open:
            if p.r is None:
                p.r = r
                self._rewards.append(r)
        self._flush()

    def select(self, cands, ctx):
        X = cands.features
        if self._last is not None:
            self._last.next = X.copy()
        idx = act(self.net, X, cands.submit, cands.ids, self.epsilon, self.rng)
        p = _Pending(X[idx].copy())
        self._open.append(p)
        self._last = p
        self._flush()
        if len(self.replay) >= self.cfg.batch_size:
            self._update()
        return idx

    def end_episode(self, state):
        if self._last is not None and self._last.next is None:
            self._last.terminal = True
        self.observe(state)
        self._flush()
        self._last = None

    def _update(self):
        cfg = self.cfg
        x, r, done, nx, nn = self.replay.sample(cfg.batch_size, self.rng)
        b, w, d = nx.shape
        qn = forward(self.target, nx.reshape(b * w, d)).reshape(b, w)
        qn[np.arange(w)[None, :] >= nn[:, None]] = -np.inf
        best = np.where(done, 0.0, qn.max(axis=1))
        y = r + cfg.gamma * best
        loss, grads = td_loss_and_grads(self.net, x, y)
        if not math.isfinite(loss):
            raise TrainingDivergedError(
                f"non-finite TD loss after {self.updates} updates "
                f"(reward range [{r.min():.3g}, {r.max():.3g}], |target| max {np.abs(y).max():.3g})")
        self.opt.step(self.net.params(), grads)
        self.updates += 1
        self._losses.append(loss)
        if self.updates % cfg.target_sync == 0:
            self.target = self.net.copy()

    def episode_stats(self):
        mean_r = float(np.mean(self._rewards)) if self._rewards else 0.0
        mean_l = float(np.mean(self._losses)) if self._losses else math.nan
        return mean_r, mean_l


class DQNPolicy(Policy):
    """Greedy inference with a trained network."""

    name = "dqn"

    def __init__(self, model: "DQNModel"):
        self.net = model.net
        self.feature_spec = model.spec

    def select(self, cands, ctx):
        q = forward(self.net, cands.features)
        return int(_kernels.argmax_tiebreak(q, cands.submit, cands.ids))


@dataclass
class DQNModel:
    net: QNetwork
    spec: FeatureSpec
    reward: str = "A"

    def policy(self) -> DQNPolicy:
        return DQNPolicy(self)

    def q_values(self, features) -> np.ndarray:
        return forward(self.net, np.atleast_2d(features))


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode", "mean_reward", "mean_loss", "epsilon"])
        for r in self.rows:
            w.writerow([r["episode"], repr(float(r["mean_reward"])), repr(float(r["mean_loss"])),
                        repr(float(r["epsilon"]))])
        return buf.getvalue()


def derive_feature_spec(trace, total_nodes: int, with_wait: bool, window: int = 20) -> FeatureSpec:
    """Caps from the training trace: the largest requested time, and the
    largest wait seen when the trace is replayed under FCFS with EASY."""
    runtime_cap = float(max(j.requested_time for j in trace))
    wait_cap = 1.0
    if with_wait:
        m = run_simulation(trace, FCFSPolicy(), total_nodes, window)
        wait_cap = float(max(1, max(r.wait_time for r in m.records)))
    return FeatureSpec(runtime_cap, wait_cap, with_wait)


def train_dqn(trace, total_nodes: int, cfg: TrainConfig, spec: FeatureSpec | None = None,
              progress=None) -> tuple[DQNModel, TrainLog]:
    """Q-learning over ``cfg.episodes`` full replays of ``trace``."""
    if not trace:
        raise ValueError("empty training trace")
    if spec is None:
        spec = derive_feature_spec(trace, total_nodes, cfg.use_wait, cfg.window)
    rng = np.random.default_rng(cfg.seed)
    net = init_network(spec.dim, rng, cfg.hidden)
    learner = DQNLearner(net, spec, cfg, rng)
    log = TrainLog()
    for ep in range(cfg.episodes):
        eps = epsilon_at(ep, cfg)
        learner.begin_episode(eps)
        run_simulation(trace, learner, total_nodes, cfg.window)
        mean_r, mean_l = learner.episode_stats()
        log.rows.append({"episode": ep, "mean_reward": mean_r, "mean_loss": mean_l, "epsilon": eps})
        if progress is not None:
            progress(log.rows[-1])
    return DQNModel(net, spec, cfg.reward), log


# -- persistence ---------------------------------------------------------------

def _fmt(a) -> str:
    return " ".join(repr(float(v)) for v in np.ravel(a))


def dump_model(model: DQNModel) -> str:
    net, spec = model.net, model.spec
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION}",
        f"reward {model.reward}",
        f"with_wait {int(spec.with_wait)}",
        f"caps {float(spec.runtime_cap)!r} {float(spec.wait_cap)!r}",
        "layers " + " ".join(str(s) for s in net.sizes),
    ]
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        lines.append(f"W{i} {w.shape[0]} {w.shape[1]}")
        lines.extend(_fmt(row) for row in w)
        lines.append(f"b{i} {b.shape[0]}")
        lines.append(_fmt(b))
    return "\n".join(lines) + "\n"


def parse_model(text: str) -> DQNModel:
    lines = text.splitlines()
    try:
        magic, version = lines[0].split()
        if magic != MODEL_MAGIC or int(version) != MODEL_VERSION:
            raise ModelFormatError(f"not a v{MODEL_VERSION} model file: {lines[0]!r}")
        reward = lines[1].split()[1]
        with_wait = bool(int(lines[2].split()[1]))
        _, rcap, wcap = lines[3].split()
        sizes = [int(s) for s in lines[4].split()[1:]]
        pos = 5
        weights, biases = [], []
        for i in range(len(sizes) - 1):
            tag, r, c = lines[pos].split()
            if tag != f"W{i}" or (int(r), int(c)) != (sizes[i], sizes[i + 1]):
                raise ModelFormatError(f"bad weight header {lines[pos]!r}")
            rows = [np.array(lines[pos + 1 + k].split(), dtype=float) for k in range(int(r))]
            weights.append(np.vstack(rows))
            pos += 1 + int(r)
            tag, n = lines[pos].split()
            if tag != f"b{i}" or int(n) != sizes[i + 1]:
                raise ModelFormatError(f"bad bias header {lines[pos]!r}")
            biases.append(np.array(lines[pos + 1].split(), dtype=float))
            pos += 2
    except (IndexError, ValueError) as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed model file: {exc}") from None
    spec = FeatureSpec(float(rcap), float(wcap), with_wait)
    return DQNModel(QNetwork(weights, biases), spec, reward)


def save_model(model: DQNModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(dump_model(model))


def load_model(path) -> DQNModel:
    with open(path) as fh:
        return parse_model(fh.read())
