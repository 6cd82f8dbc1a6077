"""Learning-rate policies.

Every policy produces a step offset ``eta`` and the server steps with
``alpha = alpha0 / (L + eta)``. Coordinate-wise policies return one offset
per coordinate in the update's support.
"""
from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


def eta_adadelay(c: float, t: int, tau: int, beta: float = 0.5) -> float:
    """``c * (t + tau) ** beta``."""
    if not c > 0:
        raise ValueError("c must be positive")
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    if t < 1 or tau < 0:
        raise ValueError("need t >= 1 and tau >= 0")
    return c * _power(float(t + tau), beta)


def _power(x, beta):
    return np.sqrt(x) if beta == 0.5 else x ** beta


def adaptive_revision_eta(sum_sq, g, g_bak):
    """``sqrt(max(0, sum_sq + 2 g g_bak))``; works elementwise."""
    return np.sqrt(np.maximum(0.0, sum_sq + 2.0 * g * g_bak))


class StepPolicy:
    kind = "abstract"
    coordinatewise = False
    needs_backlog = False

    def __init__(self, L: float = 1.0, alpha0: float = 1.0):
        if not L > 0 or not alpha0 > 0:
            raise ValueError("L and alpha0 must be positive")
        self.L = float(L)
        self.alpha0 = float(alpha0)

    def offsets(self, t: int, tau: int, idx: np.ndarray, g: np.ndarray, pulled_backlog=None):
        """Update the policy state with one applied gradient and return the step offset(s)."""
        raise NotImplementedError

    def step(self, eta):
        return self.alpha0 / (self.L + eta)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Per-feature server state held by the policy (the weight itself excluded)."""
        return {}

    def backlog(self, idx=None):
        return None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "L": self.L, "alpha0": self.alpha0}


class AdaDelayScalar(StepPolicy):
    """Scalar delay-sensitive offset ``c * (t + tau) ** beta``."""

    kind = "adadelay"

    def __init__(self, c: float = 1.0, beta: float = 0.5, L: float = 1.0, alpha0: float = 1.0):
        super().__init__(L, alpha0)
        if not c > 0:
            raise ValueError("c must be positive")
        if not 0 < beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        self.c = float(c)
        self.beta = float(beta)

    def offsets(self, t, tau, idx=None, g=None, pulled_backlog=None):
        return self.c * _power(float(t + tau), self.beta)

    def offsets_array(self, t: int, taus: np.ndarray) -> np.ndarray:
        """Vectorised offsets for many runs that share the same ``t``."""
        return self.c * _power((t + taus).astype(float), self.beta)

    def to_dict(self):
        return {**super().to_dict(), "c": self.c, "beta": self.beta}


class AdaDelayCoord(StepPolicy):
    """Per-coordinate AdaDelay: ``eta_j = c_j * (t + tau) ** beta`` with

    ``c_j = sqrt((1/t) * sum_i (i / (i + tau_i)) * g_j(i - tau_i)**2)``

    accumulated over every applied update ``i <= t``. Coordinates never
    touched have ``c_j = 0`` and fall back to the plain ``alpha0 / L`` step.
    With ``c_bounds=(M1, M2)`` each emitted ``c_j`` is clamped into the
    interval once ``t > warmup``; clamp events are counted and logged.
    """

    kind = "adadelay_coord"
    coordinatewise = True

    def __init__(self, dim: int, beta: float = 0.5, L: float = 1.0, alpha0: float = 1.0,
                 c_bounds: tuple[float, float] | None = None, warmup: int = 0):
        super().__init__(L, alpha0)
        if not 0 < beta < 1:
            raise ValueError("beta must lie in (0, 1)")
        if c_bounds is not None and not 0 < c_bounds[0] <= c_bounds[1]:
            raise ValueError("c_bounds must satisfy 0 < M1 <= M2")
        self.beta = float(beta)
        self.weighted_sq = np.zeros(dim)
        self.c_bounds = c_bounds
        self.warmup = int(warmup)
        self.clamp_events = 0
        self.last_c = np.empty(0)

    def offsets(self, t, tau, idx, g, pulled_backlog=None):
        self.weighted_sq[idx] += (t / (t + tau)) * (g * g)
        c = np.sqrt(self.weighted_sq[idx] / t)
        if self.c_bounds is not None and t > self.warmup:
            clipped = np.clip(c, *self.c_bounds)
            n = int(np.count_nonzero(clipped != c))
            if n:
                self.clamp_events += n
                log.debug("t=%d: clamped %d per-coordinate multipliers into %s", t, n, self.c_bounds)
            c = clipped
        self.last_c = c
        return c * _power(float(t + tau), self.beta)

    def state_arrays(self):
        return {"weighted_sq": self.weighted_sq}

    def to_dict(self):
        return {**super().to_dict(), "beta": self.beta, "c_bounds": self.c_bounds, "warmup": self.warmup}


class AsyncAdaGrad(StepPolicy):
    """``eta_j = sqrt(sum of squared gradients on coordinate j)``, delay-agnostic."""

    kind = "async_adagrad"
    coordinatewise = True

    def __init__(self, dim: int, L: float = 1.0, alpha0: float = 1.0):
        super().__init__(L, alpha0)
        self.sum_sq = np.zeros(dim)

    def offsets(self, t, tau, idx, g, pulled_backlog=None):
        self.sum_sq[idx] += g * g
        return np.sqrt(self.sum_sq[idx])

    def state_arrays(self):
        return {"sum_sq": self.sum_sq}


class AdaptiveRevision(StepPolicy):
    """AsyncAdaGrad with the learning-rate revision ``+ 2 g_j g_bak_j``.

    ``g_bak_j`` is the sum of coordinate ``j``'s gradients applied between
    the pull and the push of the incoming minibatch. The server keeps a
    running gradient sum per feature; a pull snapshots it and the push takes
    the difference. A negative square-root argument is clamped to 0.

    Per-feature state: weight, squared-gradient sum, gradient sum and the
    last revised accumulator.
    """

    kind = "adaptive_revision"
    coordinatewise = True
    needs_backlog = True

    def __init__(self, dim: int, L: float = 1.0, alpha0: float = 1.0):
        super().__init__(L, alpha0)
        self.sum_sq = np.zeros(dim)
        self.grad_sum = np.zeros(dim)
        self.revised = np.zeros(dim)
        self.clamp_events = 0
        self.last_g_bak = np.empty(0)

    def backlog(self, idx=None):
        return self.grad_sum.copy() if idx is None else self.grad_sum[idx].copy()

    def offsets(self, t, tau, idx, g, pulled_backlog=None):
        if pulled_backlog is None:
            raise ValueError("adaptive revision needs the gradient-sum snapshot taken at pull time")
        g_bak = self.grad_sum[idx] - pulled_backlog
        self.sum_sq[idx] += g * g
        arg = self.sum_sq[idx] + 2.0 * g * g_bak
        n = int(np.count_nonzero(arg < 0))
        if n:
            self.clamp_events += n
            log.debug("t=%d: clamped %d negative revision arguments to 0", t, n)
        arg = np.maximum(arg, 0.0)
        self.revised[idx] = arg
        self.grad_sum[idx] += g
        self.last_g_bak = g_bak
        return np.sqrt(arg)

    def state_arrays(self):
        return {"sum_sq": self.sum_sq, "grad_sum": self.grad_sum, "revised": self.revised}


def _one(j, g):
    return np.array([j], dtype=np.int64), np.array([g], dtype=float)


def eta_adadelay_coord(state: AdaDelayCoord, j: int, t: int, tau: int, g_j: float) -> float:
    """Apply one delayed gradient entry on coordinate ``j`` and return its offset."""
    idx, g = _one(j, g_j)
    return float(state.offsets(t, tau, idx, g)[0])


def eta_async_adagrad(state: AsyncAdaGrad, j: int, g_j: float) -> float:
    idx, g = _one(j, g_j)
    return float(state.offsets(0, 0, idx, g)[0])


def eta_adaptive_revision(state: AdaptiveRevision, j: int, g_j: float, g_bak_j: float) -> float:
    """Offset for coordinate ``j`` given the in-flight gradient mass ``g_bak_j``."""
    idx, g = _one(j, g_j)
    snapshot = state.grad_sum[idx] - g_bak_j
    return float(state.offsets(0, 0, idx, g, snapshot)[0])


_ENTRIES = {
    "adadelay": 1,
    "adadelay_coord": 2,
    "async_adagrad": 2,
    "adaptive_revision": 4,
}


def state_entries_per_feature(kind: str) -> int:
    """Server-side reals stored per feature, the weight included."""
    try:
        return _ENTRIES[kind]
    except KeyError:
        raise ValueError(f"unknown policy kind {kind!r}") from None


POLICY_KINDS = tuple(_ENTRIES)


def make_policy(kind: str, dim: int, *, L: float = 1.0, alpha0: float = 1.0, c: float = 1.0,
                beta: float = 0.5, c_bounds=None, warmup: int = 0) -> StepPolicy:
    if kind == "adadelay":
        return AdaDelayScalar(c=c, beta=beta, L=L, alpha0=alpha0)
    if kind == "adadelay_coord":
        return AdaDelayCoord(dim, beta=beta, L=L, alpha0=alpha0, c_bounds=c_bounds, warmup=warmup)
    if kind == "async_adagrad":
        return AsyncAdaGrad(dim, L=L, alpha0=alpha0)
    if kind == "adaptive_revision":
        return AdaptiveRevision(dim, L=L, alpha0=alpha0)
    raise ValueError(f"unknown policy kind {kind!r}")


def alpha0_grid(n: int = 9, low: float = 1e-4, high: float = 1.0) -> list[float]:
    """Log-spaced grid for the step multiplier."""
    if n == 1:
        return [high]
    return [float(v) for v in np.geomspace(low, high, n)]

