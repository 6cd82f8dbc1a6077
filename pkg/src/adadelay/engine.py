"""Projected delayed-gradient iteration, iterate averaging and run drivers.

:class:`Server` applies one delayed gradient per update in a total order that
defines the logical clock ``t``. :func:`run` drives a server with delays
sampled from a delay model; :func:`run_batch` is a vectorised version of the
same loop for many seeds of a synthetic quadratic with the scalar AdaDelay
policy, used by the Monte Carlo checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import DelayedGradientMessage, RunRecord, SparseVector, ProblemConstants
from .delay import DelayModel, DelayStream
from .problems import ProjectionSet, QuadraticProblem, Unconstrained, estimate_fstar
from .stepsize import AdaDelayScalar, StepPolicy

DEFAULT_HISTORY = 4096


class CausalityError(ValueError):
    """A gradient claims to be computed after the current server time."""


class HistoryError(LookupError):
    """A requested lagged iterate has fallen out of the history ring."""


@dataclass
class Pull:
    """What a worker receives when it pulls: the server time and a copy of the iterate."""

    t: int
    x: np.ndarray
    backlog: np.ndarray | None = None


@dataclass
class UpdateInfo:
    t: int
    tau: int
    eta: float
    alpha: float


class Server:
    """Server-side state: iterate ``x(t)``, clock ``t``, running sum of ``x(2..t)``, policy.

    ``history`` is the capacity of the ring of recent iterates used to serve
    lagged reads ``x(t - tau)``; a lag beyond it raises :class:`HistoryError`.
    """

    def __init__(self, x0, policy: StepPolicy, projection: ProjectionSet | None = None, history: int = 1):
        self.projection = projection if projection is not None else Unconstrained()
        self.policy = policy
        self.x = self.projection.project(np.asarray(x0, dtype=float))
        self.t = 1
        self.x_sum = np.zeros_like(self.x)
        self.capacity = max(int(history), 1)
        self._ring = np.empty((self.capacity, self.x.size))
        self._ring[1 % self.capacity] = self.x
        self._backlog_ring = None
        if policy.needs_backlog:
            self._backlog_ring = np.empty((self.capacity, self.x.size))
            self._backlog_ring[1 % self.capacity] = policy.backlog()

    @property
    def dim(self) -> int:
        return self.x.size

    def _slot(self, s: int) -> int:
        if s > self.t or s < 1:
            raise CausalityError(f"no iterate x({s}) at server time {self.t}")
        if self.t - s >= self.capacity:
            raise HistoryError(f"lag {self.t - s} exceeds history capacity {self.capacity}")
        return s % self.capacity

    def iterate_at(self, s: int) -> np.ndarray:
        return self._ring[self._slot(s)]

    def pull(self, idx=None) -> Pull:
        backlog = self.policy.backlog(idx) if self.policy.needs_backlog else None
        return Pull(self.t, self.x.copy(), backlog)

    def apply_update(self, msg: DelayedGradientMessage, pulled_backlog=None) -> UpdateInfo:
        return self.apply_gradient(msg.gradient, msg.computed_at, pulled_backlog)

    def apply_gradient(self, g, computed_at: int, pulled_backlog=None) -> UpdateInfo:
        """One step ``x(t+1) = P(x(t) - alpha(t, tau) * g)`` with ``tau = t - computed_at``."""
        t = self.t
        tau = t - computed_at
        if tau < 0:
            raise CausalityError(f"gradient computed at {computed_at} arrives at server time {t}")
        if computed_at < 1:
            raise CausalityError("computed_at must be >= 1")
        policy = self.policy
        if isinstance(g, SparseVector):
            idx, vals = g.indices, g.values
        else:
            idx, vals = None, np.asarray(g, dtype=float)
        if policy.coordinatewise:
            cidx = np.arange(self.dim) if idx is None else idx
            if policy.needs_backlog and pulled_backlog is None:
                pulled_backlog = self._backlog_ring[self._slot(computed_at)][cidx]
            eta = policy.offsets(t, tau, cidx, vals, pulled_backlog)
            alpha = policy.alpha0 / (policy.L + eta)
            eta_log = float(eta.mean()) if eta.size else 0.0
        else:
            eta = policy.offsets(t, tau)
            alpha = policy.alpha0 / (policy.L + eta)
            eta_log = float(eta)
        if idx is None:
            x_new = self.x - alpha * vals
        else:
            x_new = self.x.copy()
            x_new[idx] -= alpha * vals
        if not isinstance(self.projection, Unconstrained):
            x_new = self.projection.project(x_new)
        self.x = x_new
        self.x_sum += x_new
        self.t = t + 1
        self._ring[self.t % self.capacity] = x_new
        if self._backlog_ring is not None:
            self._backlog_ring[self.t % self.capacity] = policy.backlog()
        return UpdateInfo(t, tau, eta_log, policy.alpha0 / (policy.L + eta_log))

    @property
    def updates(self) -> int:
        return self.t - 1

    def averaged_iterate(self) -> np.ndarray:
        """``(1/T) * sum_{s=1}^{T} x(s+1)`` with ``T`` the number of applied updates."""
        if self.updates == 0:
            raise ValueError("no updates applied yet; the averaged iterate is undefined")
        return self.x_sum / self.updates

    def state_element_count(self) -> int:
        """Reals stored per feature across the weight and the policy state."""
        return self.x.size + sum(a.size for a in self.policy.state_arrays().values())


def default_history(delay: DelayModel | None, history: int | None, T: int | None = None) -> int:
    """Ring capacity: explicit value, else ``max_delay + 1``, else :data:`DEFAULT_HISTORY`.

    With ``T`` given the capacity never exceeds ``T + 1`` since a lag is at most ``t - 1``.
    """
    if history is not None:
        return history
    if delay is not None and delay.max_delay is not None:
        cap = delay.max_delay + 1
    else:
        cap = DEFAULT_HISTORY
    return cap if T is None else max(1, min(cap, T + 1))


def seed_streams(seed, n: int = 3) -> list[np.random.Generator]:
    """Independent generators for (delays, oracle noise, minibatch sampling)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(n)]


def reference_fstar(problem, f_star=None, projection=None) -> float:
    """``f*`` from the closed form when known, else the cached descent estimate."""
    if f_star is not None:
        return float(f_star)
    if getattr(problem, "f_star", None) is not None:
        return float(problem.f_star)
    cached = getattr(problem, "_fstar_estimate", None)
    if cached is None:
        cached = estimate_fstar(problem, projection).value
        problem._fstar_estimate = cached
    return cached


def run(
    problem,
    policy: StepPolicy,
    delay: DelayModel,
    T: int,
    seed=0,
    *,
    projection: ProjectionSet | None = None,
    x0=None,
    batch_size: int = 1,
    history: int | None = None,
    gap_every: int = 1,
    f_star: float | None = None,
    record_trajectory: bool = False,
    constants: ProblemConstants | None = None,
    config: dict | None = None,
) -> RunRecord:
    """Run ``T`` server updates with delays drawn from ``delay``.

    The gradient applied at time ``t`` is an oracle draw at ``x(t - tau_t)``
    read from the history ring. ``f_gap`` is evaluated every ``gap_every``
    steps and at ``t = T``.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    projection = projection if projection is not None else getattr(problem, "domain", Unconstrained())
    x0 = np.zeros(problem.dim) if x0 is None else x0
    server = Server(x0, policy, projection, default_history(delay, history, T))
    delay_rng, noise_rng, batch_rng = seed_streams(seed)
    stream = DelayStream(delay, delay_rng)
    fstar = reference_fstar(problem, f_star, projection)
    cols = {k: np.empty(T) for k in ("eta", "alpha", "f_gap")}
    taus = np.empty(T, dtype=np.int64)
    traj = {}
    if record_trajectory:
        traj = {
            "x": np.empty((T + 1, problem.dim)),
            "src": np.empty(T, dtype=np.int64),
            "g": np.empty((T, problem.dim)),
        }
        traj["x"][0] = server.x
    for t in range(1, T + 1):
        tau = stream.take(t)
        src = t - tau
        x_src = server.iterate_at(src)
        batch = problem.sample_batch(batch_rng, batch_size)
        g = problem.stochastic_gradient(x_src, batch, noise_rng)
        info = server.apply_gradient(g, src)
        taus[t - 1] = tau
        cols["eta"][t - 1] = info.eta
        cols["alpha"][t - 1] = info.alpha
        if gap_every and (t % gap_every == 0 or t == T):
            cols["f_gap"][t - 1] = problem.value(server.x) - fstar
        else:
            cols["f_gap"][t - 1] = math.nan
        if record_trajectory:
            traj["x"][t] = server.x
            traj["src"][t - 1] = src
            traj["g"][t - 1] = g.to_dense(problem.dim) if isinstance(g, SparseVector) else g
    x_bar = server.averaged_iterate() if T else None
    record = RunRecord(
        t=np.arange(1, T + 1),
        tau=taus,
        eta=cols["eta"],
        alpha=cols["alpha"],
        f_gap=cols["f_gap"],
        seed=_seed_int(seed),
        config=config if config is not None else _default_config(problem, policy, delay, T, batch_size),
        x_bar=x_bar,
        final_gap=problem.value(x_bar) - fstar if T else math.nan,
        last_gap=problem.value(server.x) - fstar,
        constants=constants,
        trajectory=traj,
        extra={"clamped_delays": stream.clamped, "server": server},
    )
    return record


def _seed_int(seed) -> int:
    if isinstance(seed, np.random.SeedSequence):
        return int(seed.generate_state(1, np.uint64)[0])
    return int(seed)


def _default_config(problem, policy, delay, T, batch_size) -> dict:
    return {
        "problem": problem.to_dict(),
        "policy": policy.to_dict(),
        "delay": delay.to_dict(),
        "T": T,
        "batch_size": batch_size,
    }


# --------------------------------------------------------------------------- batched Monte Carlo


@dataclass
class BatchResult:
    """Per-seed outputs of :func:`run_batch`.

    ``avg_gap[s, k]``, ``regret[s, k]`` and ``last_gap[s, k]`` are evaluated at
    ``checkpoints[k]``: the averaged-iterate gap, ``sum_{t<=T} f(x(t+1)) - f*``
    and the final-iterate gap. ``trajectory`` (optional) holds ``x`` with
    shape ``(S, T+1, d)`` (``x[:, t-1]`` is ``x(t)``), ``src``, ``tau``,
    ``g``, ``eta`` and ``alpha`` with a leading seed axis.
    """

    seeds: list
    checkpoints: list[int]
    avg_gap: np.ndarray
    regret: np.ndarray
    last_gap: np.ndarray
    taus: np.ndarray | None = None
    trajectory: dict = field(default_factory=dict)
    clamped: int = 0


def run_batch(
    problem: QuadraticProblem,
    policy: AdaDelayScalar,
    delay: DelayModel,
    T: int,
    seeds,
    *,
    projection: ProjectionSet | None = None,
    x0=None,
    checkpoints=None,
    history: int | None = None,
    record_trajectory: bool = False,
    noise_block: int = 512,
) -> BatchResult:
    """Vectorised :func:`run` over many seeds.

    Uses the same random streams as :func:`run` for each seed, so seed ``s``
    of a batch reproduces ``run(..., seed=s)`` exactly (batch size 1).
    """
    if not isinstance(problem, QuadraticProblem) or not isinstance(policy, AdaDelayScalar):
        raise TypeError("run_batch supports the synthetic quadratic with the scalar AdaDelay policy")
    projection = projection if projection is not None else problem.domain
    seeds = list(seeds)
    S, d = len(seeds), problem.dim
    checkpoints = sorted(set(checkpoints or [T]))
    if checkpoints[0] < 1 or checkpoints[-1] > T:
        raise ValueError("checkpoints must lie in [1, T]")
    cap = default_history(delay, history, T)
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    x = projection.project_rows(np.tile(x0, (S, 1)))
    ring = np.empty((cap, S, d))
    ring[1 % cap] = x
    x_sum = np.zeros((S, d))
    streams = [seed_streams(s) for s in seeds]
    delay_streams = [DelayStream(delay, st[0]) for st in streams]
    noise_rngs = [st[1] for st in streams]
    scale = problem.noise_scale
    rows = np.arange(S)
    K = len(checkpoints)
    avg_gap, regret, last_gap = np.empty((S, K)), np.empty((S, K)), np.empty((S, K))
    cum = np.zeros(S)
    all_taus = np.empty((S, T), dtype=np.int64)
    traj = {}
    if record_trajectory:
        traj = {
            "x": np.empty((S, T + 1, d)),
            "src": np.empty((S, T), dtype=np.int64),
            "g": np.empty((S, T, d)),
            "eta": np.empty((S, T)),
            "alpha": np.empty((S, T)),
        }
        traj["x"][:, 0] = x
    fstar = problem.f_star
    k = 0
    dblock = delay_streams[0].block
    noise = None
    for t in range(1, T + 1):
        off = (t - 1) % dblock
        if off == 0:
            D = np.stack([ds.block_at(t) for ds in delay_streams])
            if np.any(D < 0):
                raise ValueError("delay trace exhausted")
        noff = (t - 1) % noise_block
        if noff == 0 and scale:
            noise = np.stack([r.standard_normal((noise_block, d)) for r in noise_rngs])
        taus = D[:, off]
        src = t - taus
        if np.any(t - src >= cap):
            raise HistoryError(f"lag exceeds history capacity {cap}")
        G = problem.gradient_rows(ring[src % cap, rows])
        if scale:
            G = G + noise[:, noff] * scale
        eta = policy.offsets_array(t, taus)
        alpha = policy.alpha0 / (policy.L + eta)
        x_new = x - alpha[:, None] * G
        if not isinstance(projection, Unconstrained):
            x_new = projection.project_rows(x_new)
        x = x_new
        x_sum += x
        ring[(t + 1) % cap] = x
        all_taus[:, t - 1] = taus
        cum += problem.value_rows(x) - fstar
        if record_trajectory:
            traj["x"][:, t] = x
            traj["src"][:, t - 1] = src
            traj["g"][:, t - 1] = G
            traj["eta"][:, t - 1] = eta
            traj["alpha"][:, t - 1] = alpha
        if k < K and t == checkpoints[k]:
            avg_gap[:, k] = problem.value_rows(x_sum / t) - fstar
            regret[:, k] = cum
            last_gap[:, k] = problem.value_rows(x) - fstar
            k += 1
    return BatchResult(
        seeds=seeds,
        checkpoints=checkpoints,
        avg_gap=avg_gap,
        regret=regret,
        last_gap=last_gap,
        taus=all_taus,
        trajectory=traj,
        clamped=sum(ds.clamped for ds in delay_streams),
    )
