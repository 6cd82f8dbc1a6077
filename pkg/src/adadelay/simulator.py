"""Event-driven simulation of a parameter server with asynchronous workers.

Each worker loops forever: read a minibatch (``read`` time), pull the current
weights, compute a gradient (``service`` time scaled by ``slowdown``), push.
The server applies one gradient per push, so delays are induced by the
schedule: ``tau = (server clock at push) - (server clock at pull)``.

Events are totally ordered by ``(sim_time, push before pull, worker_id)``.
The schedule is driven by its own random stream, so it does not depend on the
step-size policy and different policies see the same delays for a seed.
"""
from __future__ import annotations

import csv
import heapq
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import RunRecord, SparseVector
from .delay import DelayStats, delay_stats, write_trace
from .engine import Server, reference_fstar, seed_streams
from .problems import Unconstrained
from .stepsize import StepPolicy

log = logging.getLogger(__name__)

PUSH, PULL = 0, 1
_TINY = float(np.finfo(float).tiny)
_KIND_NAME = {PUSH: "push", PULL: "pull"}


@dataclass(frozen=True)
class TimeDistribution:
    """Positive random duration: ``exponential`` (mean), ``deterministic`` (value) or
    ``lognormal`` (mean and log-space ``sigma``)."""

    kind: str = "exponential"
    mean: float = 1.0
    sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in ("exponential", "deterministic", "lognormal"):
            raise ValueError(f"unknown time distribution {self.kind!r}")
        if not self.mean > 0 or not math.isfinite(self.mean):
            raise ValueError("mean duration must be positive")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "deterministic":
            return self.mean
        if self.kind == "exponential":
            v = rng.exponential(self.mean)
        else:
            v = rng.lognormal(math.log(self.mean) - 0.5 * self.sigma ** 2, self.sigma)
        # exponential draws can underflow to 0; keep durations strictly positive
        return max(v, _TINY)


@dataclass(frozen=True)
class WorkerSpec:
    worker_id: int
    service: TimeDistribution = TimeDistribution()
    read: TimeDistribution = TimeDistribution()
    slowdown: float = 1.0
    minibatch_size: int = 1
    start_time: float = 0.0

    def __post_init__(self):
        if self.slowdown < 1:
            raise ValueError("slowdown factor must be >= 1")
        if self.minibatch_size < 1:
            raise ValueError("minibatch_size must be >= 1")
        if self.start_time < 0:
            raise ValueError("start_time must be nonnegative")


def make_workers(n: int, *, service: TimeDistribution | None = None, read: TimeDistribution | None = None,
                 minibatch_size: int = 1) -> list[WorkerSpec]:
    service = service or TimeDistribution()
    read = read or TimeDistribution()
    return [WorkerSpec(i, service, read, 1.0, minibatch_size) for i in range(n)]


def inject_stragglers(workers: Sequence[WorkerSpec], fraction: float, factor_set: Sequence[float],
                      rng: np.random.Generator | int = 0) -> list[WorkerSpec]:
    """Slow ``floor(fraction * W)`` randomly chosen workers by factors drawn uniformly from ``factor_set``."""
    if not 0 <= fraction <= 1:
        raise ValueError("fraction must lie in [0, 1]")
    factors = list(factor_set)
    if not factors:
        raise ValueError("factor_set is empty")
    if any(f < 1 for f in factors):
        raise ValueError("slowdown factors must be >= 1")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = list(workers)
    k = int(math.floor(fraction * len(out)))
    if k == 0:
        return out
    chosen = rng.choice(len(out), size=k, replace=False)
    picks = rng.choice(np.asarray(factors, dtype=float), size=k)
    for i, f in zip(sorted(chosen), picks[np.argsort(chosen)]):
        out[i] = replace(out[i], slowdown=float(f))
    return out


@dataclass
class SimEvent:
    sim_time: float
    kind: str
    worker: int
    minibatch: int
    server_t: int


@dataclass
class SimulationResult:
    record: RunRecord
    stats: DelayStats
    events: list[SimEvent] = field(default_factory=list)

    def __iter__(self):
        # allows ``record, stats = simulate(...)``
        return iter((self.record, self.stats))


def simulate(
    workers: Sequence[WorkerSpec],
    problem,
    policy: StepPolicy,
    T: int,
    seed=0,
    *,
    projection=None,
    x0=None,
    f_star: float | None = None,
    gap_every: int = 0,
    record_trajectory: bool = False,
    keep_events: bool = False,
    event_log: str | Path | None = None,
    warmup: int | None = None,
    early_steps: int | None = None,
    config: dict | None = None,
) -> SimulationResult:
    """Run the worker/server protocol until ``T`` updates have been applied.

    ``warmup`` (default ``10 * W``) separates the start-up transient from the
    steady state reported in ``stats.extra``; ``early_steps`` (default ``2 * W``)
    is the window used for the early-phase slope ``theta_hat``.
    """
    workers = list(workers)
    if not workers:
        raise ValueError("need at least one worker")
    if len({w.worker_id for w in workers}) != len(workers):
        raise ValueError("worker ids must be unique")
    W = len(workers)
    projection = projection if projection is not None else getattr(problem, "domain", Unconstrained())
    x0 = np.zeros(problem.dim) if x0 is None else x0
    server = Server(x0, policy, projection, history=1)
    sched_rng, noise_rng, batch_rng = seed_streams(seed)
    fstar = reference_fstar(problem, f_star, projection) if (gap_every or T) else 0.0

    heap: list[tuple] = []
    for w in workers:
        heapq.heappush(heap, (w.start_time + w.read.sample(sched_rng), PULL, w.worker_id))
    by_id = {w.worker_id: w for w in workers}
    pending: dict[int, tuple] = {}
    counters = {w.worker_id: 0 for w in workers}
    events: list[SimEvent] = []
    taus = np.empty(T, dtype=np.int64)
    eta = np.empty(T)
    alpha = np.empty(T)
    f_gap = np.full(T, math.nan)
    traj = {}
    if record_trajectory:
        traj = {"x": np.empty((T + 1, problem.dim)), "src": np.empty(T, dtype=np.int64),
                "g": np.empty((T, problem.dim)), "worker": np.empty(T, dtype=np.int64)}
        traj["x"][0] = server.x
    keep = keep_events or event_log is not None
    n_pulls = 0

    while server.updates < T:
        now, kind, wid = heapq.heappop(heap)
        spec = by_id[wid]
        if kind == PULL:
            mb = counters[wid]
            counters[wid] += 1
            batch = problem.sample_batch(batch_rng, spec.minibatch_size)
            pulled = server.pull()
            pending[wid] = (pulled, batch, mb)
            n_pulls += 1
            if keep:
                events.append(SimEvent(now, "pull", wid, mb, server.t))
            heapq.heappush(heap, (now + spec.slowdown * spec.service.sample(sched_rng), PUSH, wid))
        else:
            pulled, batch, mb = pending.pop(wid)
            g = problem.stochastic_gradient(pulled.x, batch, noise_rng)
            backlog = pulled.backlog
            if backlog is not None and isinstance(g, SparseVector):
                backlog = backlog[g.indices]
            if keep:
                events.append(SimEvent(now, "push", wid, mb, server.t))
            info = server.apply_gradient(g, pulled.t, backlog)
            i = info.t - 1
            taus[i], eta[i], alpha[i] = info.tau, info.eta, info.alpha
            if gap_every and (info.t % gap_every == 0 or info.t == T):
                f_gap[i] = problem.value(server.x) - fstar
            if record_trajectory:
                traj["x"][info.t] = server.x
                traj["src"][i] = pulled.t
                traj["g"][i] = g.to_dense(problem.dim) if isinstance(g, SparseVector) else g
                traj["worker"][i] = wid
            heapq.heappush(heap, (now + spec.read.sample(sched_rng), PULL, wid))

    if event_log is not None:
        write_event_log(events, event_log)
    x_bar = server.averaged_iterate() if T else None
    if T and not gap_every:
        f_gap[T - 1] = problem.value(server.x) - fstar
    record = RunRecord(
        t=np.arange(1, T + 1), tau=taus, eta=eta, alpha=alpha, f_gap=f_gap,
        seed=int(seed) if not isinstance(seed, np.random.SeedSequence) else 0,
        config=config if config is not None else {
            "problem": problem.to_dict(), "policy": policy.to_dict(), "workers": W, "T": T,
            "slowdowns": [w.slowdown for w in workers],
        },
        x_bar=x_bar,
        final_gap=problem.value(x_bar) - fstar if T else math.nan,
        last_gap=problem.value(server.x) - fstar,
        trajectory=traj,
        extra={"server": server, "pulls": n_pulls, "in_flight": len(pending)},
    )
    stats = _simulation_stats(taus, W, warmup, early_steps) if T else None
    return SimulationResult(record, stats, events if keep_events else [])


def _simulation_stats(taus: np.ndarray, W: int, warmup: int | None, early_steps: int | None) -> DelayStats:
    early = early_steps if early_steps is not None else min(taus.size, 2 * W)
    stats = delay_stats(taus, early_steps=max(early, 1))
    wu = 10 * W if warmup is None else warmup
    steady = taus[wu:] if wu < taus.size else taus
    hist = np.bincount(steady)
    stats.extra.update({
        "workers": W,
        "warmup": int(min(wu, taus.size)),
        "steady_mean": float(steady.mean()),
        "steady_second_moment": float(np.mean(steady.astype(float) ** 2)),
        "steady_mode": int(np.argmax(hist)),
    })
    return stats


def write_event_log(events: Sequence[SimEvent], path) -> Path:
    """CSV with columns ``sim_time, kind, worker, minibatch, server_t``."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sim_time", "kind", "worker", "minibatch", "server_t"])
        for e in events:
            w.writerow([repr(float(e.sim_time)), e.kind, e.worker, e.minibatch, e.server_t])
    return path


def read_event_log(path) -> list[SimEvent]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [SimEvent(float(r["sim_time"]), r["kind"], int(r["worker"]), int(r["minibatch"]), int(r["server_t"]))
            for r in rows]


def delays_from_events(events: Sequence[SimEvent]) -> np.ndarray:
    """Recompute the applied delays from an event log: for each push, the number of
    pushes by other workers between the matching pull and this push."""
    pulls = {}
    out = []
    applied = 0
    for e in events:
        if e.kind == "pull":
            pulls[(e.worker, e.minibatch)] = applied
        else:
            out.append(applied - pulls.pop((e.worker, e.minibatch)))
            applied += 1
    return np.asarray(out, dtype=np.int64)


def export_trace(stats, path) -> Path:
    """Write the applied-update delays one per line (readable by ``replay_trace``)."""
    if isinstance(stats, DelayStats):
        if stats.samples is None:
            raise ValueError("these delay statistics carry no per-update samples")
        delays = stats.samples
    elif isinstance(stats, RunRecord):
        delays = stats.tau
    else:
        delays = stats
    return write_trace(delays, path)
