"""Workload ingestion: SWF traces, synthetic job streams, train/test splits.

SWF (Standard Workload Format) records carry 18 whitespace-separated fields.
Only five are retained here::

    1 job id   2 submit   4 run time   5 allocated procs   8 requested procs
    9 requested time

Missing values are ``-1``.  Requested procs fall back to allocated procs,
requested time falls back to the actual run time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SWF_FIELDS = 18


class SWFParseError(ValueError):
    """A line of an SWF file could not be parsed."""

    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


class EmptyTraceError(ValueError):
    pass


class TraceSizeError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Job:
    id: int
    submit_time: int
    runtime: int
    requested_time: int
    requested_procs: int

    def __post_init__(self):
        if self.runtime <= 0:
            raise ValueError(f"job {self.id}: runtime must be positive")
        if self.requested_procs < 1:
            raise ValueError(f"job {self.id}: requested_procs must be >= 1")
        if self.requested_time < 1:
            raise ValueError(f"job {self.id}: requested_time must be >= 1")
        if self.submit_time < 0:
            raise ValueError(f"job {self.id}: negative submit_time")

    @property
    def order_key(self) -> tuple[int, int]:
        return (self.submit_time, self.id)


@dataclass
class ParseResult:
    """Jobs kept by :func:`parse_swf` plus per-reason drop counts."""

    jobs: list[Job]
    dropped: dict[str, int] = field(default_factory=dict)

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())


def parse_swf(text, cluster_size: int) -> ParseResult:
    """Parse SWF text (a string or an iterable of lines).

    Jobs with non-positive runtime, no resolvable node count, or more nodes
    than ``cluster_size`` are dropped and counted in ``ParseResult.dropped``.
    """
    lines = text.splitlines() if isinstance(text, str) else text
    dropped = {"runtime": 0, "procs": 0, "too_large": 0}
    jobs = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith(";"):
            continue
        parts = line.split()
        if len(parts) < SWF_FIELDS:
            raise SWFParseError(lineno, f"expected {SWF_FIELDS} fields, got {len(parts)}")
        try:
            # field 6 (avg cpu time) may be fractional in some archives
            values = [int(float(p)) if i == 5 else int(p) for i, p in enumerate(parts[:SWF_FIELDS])]
        except ValueError as exc:
            raise SWFParseError(lineno, f"non-numeric field ({exc})") from None

        job_id, submit, runtime = values[0], values[1], values[3]
        procs = values[7] if values[7] != -1 else values[4]
        req_time = values[8] if values[8] != -1 else runtime
        if runtime <= 0:
            dropped["runtime"] += 1
            continue
        if procs <= 0:
            dropped["procs"] += 1
            continue
        if procs > cluster_size:
            dropped["too_large"] += 1
            continue
        jobs.append(Job(job_id, max(submit, 0), runtime, max(req_time, 1), procs))

    if not jobs:
        raise EmptyTraceError("no usable jobs in trace")
    jobs.sort(key=lambda j: j.order_key)
    return ParseResult(jobs, dropped)


def read_swf(path, cluster_size: int) -> ParseResult:
    with open(path) as fh:
        return parse_swf(fh, cluster_size)


def to_swf(jobs, header: dict | None = None) -> str:
    """Serialize jobs as SWF text; unknown fields are written as -1."""
    out = []
    for key, value in (header or {}).items():
        out.append(f"; {key}: {value}")
    for j in jobs:
        rec = [-1] * SWF_FIELDS
        rec[0], rec[1], rec[3] = j.id, j.submit_time, j.runtime
        rec[4], rec[7], rec[8] = j.requested_procs, j.requested_procs, j.requested_time
        rec[10] = 1  # status: completed
        out.append(" ".join(str(v) for v in rec))
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class SyntheticConfig:
    n_jobs: int = 1000
    mean_interarrival: float = 300.0
    runtime_range: tuple[int, int] = (60, 14400)
    size_range: tuple[int, int] = (1, 64)
    seed: int = 0

    def __post_init__(self):
        if self.n_jobs < 1:
            raise ValueError("n_jobs must be >= 1")
        if self.mean_interarrival <= 0:
            raise ValueError("mean_interarrival must be positive")
        for name in ("runtime_range", "size_range"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ValueError(f"{name} must satisfy 1 <= min <= max, got {(lo, hi)}")


def round_up_walltime(runtime: int, quantum: int = 600) -> int:
    return int(math.ceil(runtime / quantum) * quantum)


def generate_synthetic(cfg: SyntheticConfig) -> list[Job]:
    """Draw a synthetic trace: Poisson arrivals, log-uniform runtimes,
    power-of-two job sizes.  Deterministic for a fixed ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    gaps = rng.exponential(cfg.mean_interarrival, size=cfg.n_jobs)
    gaps[0] = 0.0
    submits = np.floor(np.cumsum(gaps)).astype(np.int64)

    lo, hi = cfg.runtime_range
    runtimes = np.exp(rng.uniform(math.log(lo), math.log(hi), size=cfg.n_jobs))
    runtimes = np.clip(np.round(runtimes), lo, hi).astype(np.int64)

    smin, smax = cfg.size_range
    pows = [1 << k for k in range(int(math.log2(smax)) + 2)]
    sizes = sorted({min(max(p, smin), smax) for p in pows})
    procs = rng.choice(np.array(sizes), size=cfg.n_jobs)

    return [
        Job(i + 1, int(submits[i]), int(runtimes[i]), round_up_walltime(int(runtimes[i])), int(procs[i]))
        for i in range(cfg.n_jobs)
    ]


def rebase(jobs: list[Job]) -> list[Job]:
    if not jobs:
        return []
    t0 = jobs[0].submit_time
    return [replace(j, submit_time=j.submit_time - t0) for j in jobs]


def split_trace(jobs: list[Job], n_train: int, n_test: int) -> tuple[list[Job], list[Job]]:
    """First ``n_train`` jobs for training, the next ``n_test`` for testing.

    Each part is shifted so that its first submit time is zero.
    """
    if n_train < 0 or n_test < 0:
        raise TraceSizeError("split sizes must be non-negative")
    if n_train + n_test > len(jobs):
        raise TraceSizeError(f"need {n_train + n_test} jobs, trace has {len(jobs)}")
    return rebase(jobs[:n_train]), rebase(jobs[n_train:n_train + n_test])
