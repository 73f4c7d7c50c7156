"""Event-driven batch-cluster simulator with EASY backfilling.

Scheduling happens at every distinct event time, after all Finish and Submit
events stamped with that time have been applied (Finish first).  A pass has
two phases:

1. Selection: the policy repeatedly picks a job that fits the free nodes from
   the head of the queue (the first ``window`` jobs for agent policies, only
   the head for in-order policies such as FCFS).
2. Backfilling: the head gets a reservation at the shadow time; up to
   ``window`` later jobs that fit now and neither end after the shadow time
   nor eat into the extra nodes are offered to the policy, one start at a time.

Running jobs finish after their actual runtime; requested time is only used
for features and for the backfill check.
"""

from __future__ import annotations

import copy
import csv
import heapq
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .policies import Decision, Policy, PolicyContractError, make_candidates, utilization
from .workload import Job

FINISH, SUBMIT = 0, 1
BACKFILL_MODES = ("easy", "off", "unconstrained")

# Re-verify node accounting after every scheduling instance.  The test suite
# switches this on globally.
CHECK_INVARIANTS = False


class SimulationError(RuntimeError):
    pass


class RejectedJobsError(SimulationError):
    def __init__(self, ids):
        super().__init__(f"jobs larger than the cluster: {sorted(ids)}")
        self.ids = sorted(ids)


class EmptyMetricsError(ValueError):
    pass


@dataclass
class RunningJob:
    job: Job
    start: int
    end: int


class ClusterState:
    def __init__(self, total_nodes: int):
        if total_nodes < 1:
            raise ValueError("total_nodes must be >= 1")
        self.total_nodes = total_nodes
        self.free_nodes = total_nodes
        self.running: dict[int, RunningJob] = {}
        self.queue: list[Job] = []
        self.clock = 0

    def start(self, job: Job) -> RunningJob:
        if job.requested_procs > self.free_nodes:
            raise SimulationError(f"job {job.id} needs {job.requested_procs} nodes, {self.free_nodes} free")
        self.queue.remove(job)
        self.free_nodes -= job.requested_procs
        r = RunningJob(job, self.clock, self.clock + job.runtime)
        self.running[job.id] = r
        return r

    def finish(self, job: Job) -> None:
        r = self.running.pop(job.id)
        self.free_nodes += r.job.requested_procs

    def check(self) -> None:
        used = sum(r.job.requested_procs for r in self.running.values())
        if self.free_nodes != self.total_nodes - used or not 0 <= self.free_nodes <= self.total_nodes:
            raise SimulationError(
                f"node accounting broken at t={self.clock}: free={self.free_nodes}, used={used}")
        for r in self.running.values():
            if r.start < r.job.submit_time:
                raise SimulationError(f"job {r.job.id} started before submission")
        keys = [j.order_key for j in self.queue]
        if keys != sorted(keys):
            raise SimulationError("wait queue out of order")


def reservation(state: ClusterState, head: Job) -> tuple[float, int]:
    """Shadow time and extra nodes for ``head`` given the running set."""
    free = state.free_nodes
    if head.requested_procs <= free:
        return state.clock, free - head.requested_procs
    ends = sorted((r.end, r.job.requested_procs) for r in state.running.values())
    shadow = None
    for end, procs in ends:
        if shadow is not None and end > shadow:
            break
        free += procs
        if shadow is None and free >= head.requested_procs:
            shadow = end
    return shadow, free - head.requested_procs


class LatencyStats:
    def __init__(self):
        self.calls = 0
        self.total = 0.0

    def add(self, dt: float):
        self.calls += 1
        self.total += dt

    @property
    def mean(self) -> float:
        return self.total / self.calls if self.calls else math.nan


def _ask(policy: Policy, jobs, state, phase, latency) -> Job:
    cands = make_candidates(jobs, state, policy.feature_spec)
    ctx = Decision(state.clock, len(state.queue), phase, state)
    t0 = time.perf_counter()
    idx = policy.select(cands, ctx)
    dt = time.perf_counter() - t0
    if latency is not None:
        latency.add(dt)
    if not isinstance(idx, (int, np.integer)) or not 0 <= idx < len(jobs):
        raise PolicyContractError(f"{policy.name} returned {idx!r} for {len(jobs)} candidates")
    return jobs[int(idx)]


def backfill_candidates(state: ClusterState, shadow, extra, limit, mode="easy") -> list[Job]:
    out = []
    for job in state.queue[1:]:
        if job.requested_procs > state.free_nodes:
            continue
        if mode == "easy" and state.clock + job.requested_time > shadow and job.requested_procs > extra:
            continue
        out.append(job)
        if len(out) == limit:
            break
    return out


def scheduling_pass(state: ClusterState, policy: Policy, window: int = 20,
                    backfill: str = "easy", latency: LatencyStats | None = None) -> list[Job]:
    """Run one scheduling pass at ``state.clock``; returns the jobs started."""
    if backfill not in BACKFILL_MODES:
        raise ValueError(f"backfill must be one of {BACKFILL_MODES}")
    started = []
    width = 1 if policy.in_order else window
    while state.queue:
        fits = [j for j in state.queue[:width] if j.requested_procs <= state.free_nodes]
        if not fits:
            break
        job = _ask(policy, fits, state, "select", latency)
        state.start(job)
        started.append(job)

    if backfill == "off" or not state.queue:
        return started

    shadow, extra = reservation(state, state.queue[0])
    while True:
        cands = backfill_candidates(state, shadow, extra, window, backfill)
        if not cands:
            break
        job = _ask(policy, cands, state, "backfill", latency)
        state.start(job)
        started.append(job)
        if state.clock + job.requested_time > shadow:
            extra -= job.requested_procs
    return started


@dataclass(frozen=True)
class JobRecord:
    id: int
    submit: int
    start: int
    runtime: int
    procs: int

    @property
    def wait_time(self) -> int:
        return self.start - self.submit

    @property
    def response_time(self) -> int:
        return self.wait_time + self.runtime

    @property
    def slowdown(self) -> float:
        return self.response_time / self.runtime


@dataclass
class Metrics:
    avg_wait: float
    avg_slowdown: float
    records: list[JobRecord] = field(repr=False)
    makespan: int = 0
    decisions: int = 0
    mean_latency: float = math.nan

    def row(self) -> dict:
        return {
            "n_jobs": len(self.records),
            "avg_wait": repr(float(self.avg_wait)),
            "avg_slowdown": repr(float(self.avg_slowdown)),
            "makespan": self.makespan,
            "decisions": self.decisions,
            "mean_latency_s": f"{self.mean_latency:.3e}",
        }


def compute_metrics(records, latency: LatencyStats | None = None) -> Metrics:
    if not records:
        raise EmptyMetricsError("no job records")
    waits = np.array([r.wait_time for r in records], dtype=float)
    slows = np.array([r.slowdown for r in records])
    makespan = max(r.start + r.runtime for r in records) - min(r.submit for r in records)
    return Metrics(
        avg_wait=float(waits.mean()),
        avg_slowdown=float(slows.mean()),
        records=list(records),
        makespan=int(makespan),
        decisions=latency.calls if latency else 0,
        mean_latency=latency.mean if latency else math.nan,
    )


class Simulator:
    """Step-able simulation of one trace under one policy.

    The state is plain Python data, so ``copy.deepcopy`` forks a run (used
    to compare continuations with and without backfilling).
    """

    def __init__(self, jobs, policy: Policy, total_nodes: int, window: int = 20, backfill: str = "easy"):
        too_big = [j.id for j in jobs if j.requested_procs > total_nodes]
        if too_big:
            raise RejectedJobsError(too_big)
        if window < 1:
            raise ValueError("window must be >= 1")
        self.policy = policy
        self.window = window
        self.backfill = backfill
        self.state = ClusterState(total_nodes)
        self.events = [(j.submit_time, SUBMIT, j.id, j) for j in jobs]
        heapq.heapify(self.events)
        self.starts: dict[int, int] = {}
        self.jobs = {j.id: j for j in jobs}
        if len(self.jobs) != len(jobs):
            raise SimulationError("duplicate job ids in trace")
        self.latency = LatencyStats()
        self.last_started: list[Job] = []

    @property
    def done(self) -> bool:
        return not self.events

    def step(self) -> list[Job]:
        """Apply every event at the next event time, then run one pass."""
        state, events = self.state, self.events
        t = events[0][0]
        state.clock = t
        while events and events[0][0] == t:
            _, kind, _, job = heapq.heappop(events)
            if kind == FINISH:
                state.finish(job)
            else:
                state.queue.append(job)
        self.policy.observe(state)
        started = scheduling_pass(state, self.policy, self.window, self.backfill, self.latency)
        for job in started:
            self.starts[job.id] = t
            heapq.heappush(events, (t + job.runtime, FINISH, job.id, job))
        if CHECK_INVARIANTS:
            state.check()
        self.last_started = started
        return started

    def run(self) -> Metrics:
        while self.events:
            self.step()
        if self.state.queue or self.state.running:
            raise SimulationError("simulation ended with unfinished jobs")
        self.policy.end_episode(self.state)
        return self.metrics()

    def records(self) -> list[JobRecord]:
        return [JobRecord(j.id, j.submit_time, self.starts[j.id], j.runtime, j.requested_procs)
                for j in sorted(self.jobs.values(), key=lambda j: j.order_key) if j.id in self.starts]

    def metrics(self) -> Metrics:
        recs = self.records()
        if CHECK_INVARIANTS and recs:
            peak = peak_usage(recs)
            if peak > self.state.total_nodes:
                raise SimulationError(f"peak usage {peak} exceeds {self.state.total_nodes} nodes")
        return compute_metrics(recs, self.latency)

    def fork(self) -> "Simulator":
        return copy.deepcopy(self)


def run_simulation(jobs, policy: Policy, total_nodes: int, window: int = 20, backfill: str = "easy") -> Metrics:
    return Simulator(jobs, policy, total_nodes, window, backfill).run()


def peak_usage(records) -> int:
    """Maximum number of simultaneously busy nodes (interval sweep)."""
    deltas = {}
    for r in records:
        deltas[r.start] = deltas.get(r.start, 0) + r.procs
        end = r.start + r.runtime
        deltas[end] = deltas.get(end, 0) - r.procs
    peak = busy = 0
    for t in sorted(deltas):
        busy += deltas[t]
        peak = max(peak, busy)
    return peak


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "submit", "start", "wait", "runtime", "slowdown"])
    for r in records:
        w.writerow([r.id, r.submit, r.start, r.wait_time, r.runtime, repr(float(r.slowdown))])
    return buf.getvalue()
