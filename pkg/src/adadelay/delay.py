"""Stochastic delay processes, trace replay and delay statistics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import DelaySample

log = logging.getLogger(__name__)


class DelayModel:
    """Base class. ``sample_raw`` draws unclamped delays for an array of times."""

    kind = "abstract"

    @property
    def max_delay(self) -> int | None:
        """Hard upper bound on any sampled delay, or None when unbounded."""
        return None

    def sample_raw(self, t: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def sample(self, t, rng: np.random.Generator) -> tuple[np.ndarray, int]:
        """Delays for times ``t`` clamped to ``t - 1``; returns ``(taus, n_clamped)``."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 1):
            raise ValueError("time index must be >= 1")
        raw = self.sample_raw(t, rng)
        taus = np.minimum(raw, t - 1)
        return taus, int(np.count_nonzero(raw > taus))

    def to_dict(self) -> dict:
        return {"kind": self.kind}


@dataclass
class UniformDelay(DelayModel):
    """Delays uniform on the integers ``{0, ..., 2*tau_bar}``."""

    tau_bar: int
    kind = "uniform"

    def __post_init__(self):
        if self.tau_bar < 0 or int(self.tau_bar) != self.tau_bar:
            raise ValueError("tau_bar must be a nonnegative integer")
        self.tau_bar = int(self.tau_bar)

    @property
    def max_delay(self):
        return 2 * self.tau_bar

    def sample_raw(self, t, rng):
        return rng.integers(0, 2 * self.tau_bar + 1, size=np.shape(t))

    def to_dict(self):
        return {"kind": self.kind, "tau_bar": self.tau_bar}


@dataclass
class ScaledDelay(DelayModel):
    """Delays with constant mean ``tau_bar`` and second moment ``B2`` truncated below ``theta * t``.

    ``family`` selects the base distribution:

    - ``"geometric"``: zero-inflated geometric, needs ``B2 >= 2*tau_bar**2 - tau_bar``;
    - ``"negbin"``: negative binomial, needs variance ``B2 - tau_bar**2 > tau_bar``.

    Samples at or above ``theta * t`` are clamped to the largest admissible
    integer, so the moments are exact only once ``theta * t`` is well above
    the bulk of the distribution.
    """

    theta: float
    tau_bar: float
    B2: float
    family: str = "geometric"
    kind = "scaled"

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        m, v = self.tau_bar, self.B2 - self.tau_bar ** 2
        if m <= 0 or v < 0:
            raise ValueError("need tau_bar > 0 and B2 >= tau_bar**2")
        if self.family == "geometric":
            if self.B2 < 2 * m * m - m:
                raise ValueError("geometric family needs B2 >= 2*tau_bar^2 - tau_bar")
            self._p = 2.0 / (self.B2 / m + 1.0)
            self._q = 1.0 - m * self._p
        elif self.family == "negbin":
            if v <= m:
                raise ValueError("negbin family needs variance > mean")
            self._p = m / v
            self._r = m * m / (v - m)
        else:
            raise ValueError(f"unknown scaled-delay family {self.family!r}")

    def bound(self, t: np.ndarray) -> np.ndarray:
        """Largest integer strictly below ``theta * t``."""
        return np.ceil(self.theta * np.asarray(t, dtype=float)).astype(np.int64) - 1

    def sample_raw(self, t, rng):
        shape = np.shape(t)
        if self.family == "geometric":
            active = rng.random(shape) >= self._q
            raw = np.where(active, rng.geometric(self._p, size=shape), 0)
        else:
            raw = rng.negative_binomial(self._r, self._p, size=shape)
        return np.minimum(raw, self.bound(t))

    def to_dict(self):
        return {"kind": self.kind, "theta": self.theta, "tau_bar": self.tau_bar, "B2": self.B2, "family": self.family}


@dataclass
class TruncatedGaussianDelay(DelayModel):
    """Rounded Gaussian delays truncated to ``[0, cap]`` (and to ``t - 1`` by clamping)."""

    mean: float
    std: float
    cap: int
    kind = "truncated_gaussian"

    def __post_init__(self):
        if self.std < 0 or self.cap < 0:
            raise ValueError("std and cap must be nonnegative")

    @property
    def max_delay(self):
        return int(self.cap)

    def sample_raw(self, t, rng):
        raw = np.rint(rng.normal(self.mean, self.std, size=np.shape(t))).astype(np.int64)
        return np.clip(raw, 0, self.cap)

    def to_dict(self):
        return {"kind": self.kind, "mean": self.mean, "std": self.std, "cap": self.cap}


@dataclass
class TraceDelay(DelayModel):
    """Deterministic replay: the delay at time ``t`` is ``delays[t - 1]``."""

    delays: np.ndarray
    kind = "trace"

    def __post_init__(self):
        self.delays = np.asarray(self.delays, dtype=np.int64)
        if np.any(self.delays < 0):
            raise ValueError("trace delays must be nonnegative")

    @property
    def max_delay(self):
        return int(self.delays.max(initial=0))

    def sample_raw(self, t, rng):
        # times past the end of the trace map to -1; readers treat that as exhaustion
        t = np.asarray(t)
        out = np.full(t.shape, -1, dtype=np.int64)
        ok = t <= self.delays.size
        out[ok] = self.delays[t[ok] - 1]
        return out

    def to_dict(self):
        return {"kind": self.kind, "length": int(self.delays.size)}


def sample_delay(model: DelayModel, t: int, rng: np.random.Generator) -> DelaySample:
    (tau,), _ = model.sample(np.array([t]), rng)
    return DelaySample(int(tau), int(t - tau))


class DelayStream:
    """Per-run delay source that draws from ``model`` in fixed-size blocks.

    Block drawing keeps single runs and seed-batched runs on identical
    random streams.
    """

    def __init__(self, model: DelayModel, rng: np.random.Generator, block: int = 4096):
        self.model = model
        self.rng = rng
        self.block = block
        self.clamped = 0
        self._buf = np.empty(0, dtype=np.int64)
        self._start = 1

    def block_at(self, t: int) -> np.ndarray:
        """Draw the block of delays for times ``t .. t + block - 1``."""
        self._start = t
        self._buf, n = self.model.sample(np.arange(t, t + self.block), self.rng)
        self.clamped += n
        if n:
            log.debug("clamped %d delays to available history near t=%d", n, t)
        return self._buf

    def take(self, t: int) -> int:
        off = t - self._start
        if off < 0:
            raise ValueError("delay stream must be read in increasing time order")
        if off >= self._buf.size:
            self.block_at(t)
            off = 0
        tau = int(self._buf[off])
        if tau < 0:
            raise ValueError(f"delay trace exhausted at t={t}")
        return tau


# --------------------------------------------------------------------------- traces


class TraceFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def replay_trace(path) -> list[int]:
    """Read one nonnegative integer delay per line."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            try:
                v = int(s)
            except ValueError:
                raise TraceFormatError(lineno, f"not an integer: {s!r}") from None
            if v < 0:
                raise TraceFormatError(lineno, f"negative delay {v}")
            out.append(v)
    return out


def write_trace(delays: Sequence[int], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(f"{int(d)}\n" for d in delays))
    return path


# --------------------------------------------------------------------------- statistics


@dataclass
class DelayStats:
    histogram: np.ndarray
    mean: float
    second_moment: float
    theta_hat: float
    n: int
    clamped: int = 0
    extra: dict = field(default_factory=dict)
    samples: np.ndarray | None = field(default=None, repr=False)

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean ** 2

    @property
    def mode(self) -> int:
        return int(np.argmax(self.histogram))

    def histogram_dict(self) -> dict[int, int]:
        return {int(k): int(c) for k, c in enumerate(self.histogram) if c}

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "mean": self.mean,
            "second_moment": self.second_moment,
            "variance": self.variance,
            "theta_hat": self.theta_hat,
            "mode": self.mode,
            "clamped": self.clamped,
            "histogram": self.histogram_dict(),
            **self.extra,
        }


def early_slope(taus: np.ndarray, t: np.ndarray | None = None) -> float:
    """Least-squares slope of ``tau`` on ``t`` through the origin."""
    taus = np.asarray(taus, dtype=float)
    t = np.arange(1, taus.size + 1, dtype=float) if t is None else np.asarray(t, dtype=float)
    return float(np.dot(t, taus) / np.dot(t, t))


def delay_stats(
    samples: Sequence[int],
    *,
    early_fraction: float = 0.1,
    early_steps: int | None = None,
    clamped: int = 0,
) -> DelayStats:
    """Histogram and moments of a delay sequence indexed by ``t = 1, 2, ...``.

    ``theta_hat`` is the slope of ``tau_t ~ theta * t`` over the first
    ``early_steps`` samples (default: ``early_fraction`` of them, at least 2).
    """
    taus = np.asarray(samples, dtype=np.int64)
    if taus.size == 0:
        raise ValueError("delay_stats needs at least one sample")
    if np.any(taus < 0):
        raise ValueError("delays must be nonnegative")
    hist = np.bincount(taus)
    k = np.arange(hist.size, dtype=float)
    n = int(taus.size)
    mean = float(np.dot(k, hist) / n)
    second = float(np.dot(k * k, hist) / n)
    m = early_steps if early_steps is not None else max(2, int(math.ceil(early_fraction * n)))
    m = min(max(m, 1), n)
    theta = early_slope(taus[:m])
    return DelayStats(hist, mean, second, theta, n, clamped, samples=taus)
