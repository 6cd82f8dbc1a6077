"""Gap decomposition residuals, expectation-bound checks and rate fitting.

Residuals need exact gradients and a known minimiser, so they are computed
only for :class:`~adadelay.problems.QuadraticProblem` instances. Arrays carry
an optional leading seed axis: a trajectory ``x`` of shape ``(S, T+1, d)``
gives residual arrays of shape ``(S, T)``.

Bounds assume the scalar delay-adaptive policy with ``alpha0 = 1`` so that
``1/alpha = L + eta``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import ProblemConstants, RunRecord
from .delay import DelayModel, ScaledDelay, UniformDelay
from .problems import QuadraticProblem

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ResidualRow:
    t: int
    delta: float
    gamma: float
    sigma_term: float
    z_t: float
    r_t: float


@dataclass
class Residuals:
    """Per-step analysis quantities, arrays of shape ``(S, T)``.

    ``delta``, ``gamma`` and ``sigma_term`` are the distance-contraction,
    staleness and noise terms. ``cross`` is the zero-mean term
    ``<grad f(x_src) - g, x(t) - x*>``. ``err_inner``, ``curv_term`` and the
    three nonnegative ``slack_*`` arrays make the per-step gap an exact
    identity (see :meth:`identity_residual`).
    """

    t: np.ndarray
    tau: np.ndarray
    eta: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray
    gamma: np.ndarray
    sigma_term: np.ndarray
    cross: np.ndarray
    z: np.ndarray
    r: np.ndarray
    gap: np.ndarray
    err_inner: np.ndarray
    curv_term: np.ndarray
    slack_convex: np.ndarray
    slack_smooth: np.ndarray
    slack_proj: np.ndarray
    lag_dist: np.ndarray

    @property
    def n_seeds(self) -> int:
        return self.delta.shape[0]

    @property
    def T(self) -> int:
        return self.delta.shape[1]

    def identity_rhs(self) -> np.ndarray:
        return (self.delta + self.err_inner + self.curv_term
                - self.slack_convex - self.slack_smooth - self.slack_proj)

    def identity_residual(self) -> np.ndarray:
        """Relative error of the exact per-step gap identity."""
        scale = (np.abs(self.gap) + np.abs(self.delta) + np.abs(self.err_inner) + np.abs(self.curv_term)
                 + self.slack_convex + self.slack_smooth + self.slack_proj)
        return np.abs(self.gap - self.identity_rhs()) / np.maximum(scale, np.finfo(float).tiny)

    def inequality_rhs(self) -> np.ndarray:
        return self.delta + self.gamma + self.cross + self.sigma_term

    def inequality_holds(self, rtol: float = 1e-9) -> np.ndarray:
        """Per-step check of ``gap <= delta + gamma + cross + sigma_term``."""
        rhs = self.inequality_rhs()
        scale = np.abs(self.delta) + np.abs(self.gamma) + np.abs(self.cross) + self.sigma_term + np.abs(self.gap)
        return self.gap <= rhs + rtol * scale

    def rows(self, seed_index: int = 0) -> list[ResidualRow]:
        s = seed_index
        return [
            ResidualRow(int(t), float(d), float(g), float(sg), float(z), float(r))
            for t, d, g, sg, z, r in zip(self.t, self.delta[s], self.gamma[s], self.sigma_term[s], self.z[s], self.r[s])
        ]


def compute_residuals(problem: QuadraticProblem, x, src, g, eta, alpha, *, L: float | None = None) -> Residuals:
    """Residuals from a logged trajectory.

    ``x[..., t-1, :]`` is ``x(t)`` for ``t = 1..T+1``; ``src[..., t-1]`` is the
    time ``t - tau_t`` whose iterate produced the gradient ``g[..., t-1, :]``;
    ``eta`` and ``alpha`` are the logged step offset and step.
    """
    if not isinstance(problem, QuadraticProblem):
        raise TypeError("residuals need a quadratic problem with known minimiser and exact gradients")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 2
    if single:
        x, src, g, eta, alpha = x[None], np.asarray(src)[None], np.asarray(g)[None], np.asarray(eta)[None], np.asarray(alpha)[None]
    src = np.asarray(src, dtype=np.int64)
    g = np.asarray(g, dtype=float)
    eta = np.asarray(eta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    S, T1, d = x.shape
    T = T1 - 1
    if src.shape != (S, T) or g.shape != (S, T, d):
        raise ValueError("trajectory arrays have inconsistent shapes")
    t = np.arange(1, T + 1)
    if np.any(src < 1) or np.any(src > t):
        raise ValueError("trajectory references an iterate outside x(1)..x(t)")
    L = problem.L if L is None else float(L)
    H = problem.curvature
    xs = problem.x_star

    x_t = x[:, :-1]
    x_next = x[:, 1:]
    x_src = np.take_along_axis(x, (src - 1)[:, :, None], axis=1)
    grad_t = H * (x_t - xs)
    grad_src = H * (x_src - xs)
    u = x_next - xs
    e_now = x_t - xs
    step = x_t - x_next
    noise = grad_src - g

    r = np.einsum("stk,stk->st", e_now, e_now)
    r_next = np.einsum("stk,stk->st", u, u)
    dsq = np.einsum("stk,stk->st", step, step)
    inv_alpha = 1.0 / alpha
    delta = 0.5 * inv_alpha * (r - r_next)
    gamma = np.einsum("stk,stk->st", grad_t - grad_src, u)
    with np.errstate(divide="ignore"):
        sigma_term = np.einsum("stk,stk->st", noise, noise) / (2.0 * eta)
    cross = np.einsum("stk,stk->st", noise, e_now)
    z = np.full((S, T), np.nan)
    z[:, 1:] = np.diff(eta, axis=1)
    gap = 0.5 * np.einsum("stk,stk->st", H * u, u) - problem.f_star
    err_inner = np.einsum("stk,stk->st", grad_t - g, u)
    curv_term = 0.5 * (L - inv_alpha) * dsq
    slack_convex = 0.5 * np.einsum("stk,stk->st", H * e_now, e_now)
    slack_smooth = 0.5 * L * dsq - 0.5 * np.einsum("stk,stk->st", H * step, step)
    proj = np.einsum("stk,stk->st", step - alpha[:, :, None] * g, xs - x_next)
    slack_proj = -proj * inv_alpha
    lag = x_next - x_src
    lag_dist = np.einsum("stk,stk->st", lag, lag)
    return Residuals(
        t=t, tau=t - src, eta=eta, alpha=alpha, delta=delta, gamma=gamma, sigma_term=sigma_term,
        cross=cross, z=z, r=r, gap=gap, err_inner=err_inner, curv_term=curv_term,
        slack_convex=slack_convex, slack_smooth=slack_smooth, slack_proj=slack_proj, lag_dist=lag_dist,
    )


def residuals_from_record(record: RunRecord, problem: QuadraticProblem) -> Residuals:
    traj = record.trajectory
    missing = {"x", "src", "g"} - set(traj)
    if missing:
        raise ValueError(f"run record lacks trajectory arrays {sorted(missing)}")
    return compute_residuals(problem, traj["x"], traj["src"], traj["g"], record.eta, record.alpha)


def residuals_from_batch(batch, problem: QuadraticProblem) -> Residuals:
    traj = batch.trajectory
    if not traj:
        raise ValueError("batch was run without record_trajectory=True")
    return compute_residuals(problem, traj["x"], traj["src"], traj["g"], traj["eta"], traj["alpha"])


# --------------------------------------------------------------------------- closed-form bounds


def _delay_moments(model: DelayModel) -> tuple[float, float, float | None]:
    """``(tau_bar, B2, theta)`` for the two analysed delay families."""
    if isinstance(model, UniformDelay):
        n = 2 * model.tau_bar
        return float(model.tau_bar), n * (2 * n + 1) / 6.0, None
    if isinstance(model, ScaledDelay):
        return float(model.tau_bar), float(model.B2), float(model.theta)
    raise TypeError(f"no closed-form bounds for delay model {type(model).__name__}")


def lemma_delta_uniform(constants: ProblemConstants, tau_bar: float, c: float, T: int) -> float:
    L, R = constants.L, constants.R
    return 0.5 * (L + c) * R ** 2 + math.sqrt(2.0) * c * R ** 2 * tau_bar * math.sqrt(T)


def lemma_delta_scaled(constants: ProblemConstants, tau_bar: float, c: float, T: int) -> float:
    L, R = constants.L, constants.R
    t = np.arange(2, T + 1, dtype=float)
    return 0.5 * R ** 2 * (L + c) + 0.5 * c * R ** 2 * float(np.sum((tau_bar + 1.0) / np.sqrt(2.0 * t - 1.0)))


def gamma_uniform_constants(constants: ProblemConstants, tau_bar: float, c: float) -> tuple[float, float]:
    """``(C1, C2)`` of the uniform-delay staleness bound."""
    L, G = constants.L, constants.G
    tb = tau_bar
    C1 = G ** 2 * tb * (tb + 1) * (2 * tb + 1) ** 2 / (3.0 * (L ** 2 + c ** 2))
    C2 = G ** 2 * (4 * tb + 3) * (tb + 1) / (3.0 * c ** 2)
    return C1, C2


def lemma_gamma_uniform(constants: ProblemConstants, tau_bar: float, c: float, T: int) -> float:
    C1, C2 = gamma_uniform_constants(constants, tau_bar, c)
    L, G, R = constants.L, constants.G, constants.R
    return tau_bar * G * R + 0.5 * L * C1 + 0.5 * L * C2 * math.log(T)


def _scaled_gamma_sums(constants, tau_bar, B2, theta, c, T, L_factor):
    L, G, R = constants.L, constants.G, constants.R
    s = np.arange(1, T, dtype=float)
    tail = G * R * (1.0 + float(np.sum(B2 / (T - s) ** 2)))
    t = np.arange(1, T + 1, dtype=float)
    drift = L_factor * G ** 2 * float(np.sum((B2 + 1.0 + tau_bar) / (L ** 2 + c ** 2 * (1.0 - theta) * t)))
    return tail, drift


def lemma_gamma_scaled(constants: ProblemConstants, tau_bar: float, B2: float, theta: float, c: float, T: int) -> float:
    tail, drift = _scaled_gamma_sums(constants, tau_bar, B2, theta, c, T, constants.L)
    return tail + drift


def lemma_sigma(constants: ProblemConstants, c: float, T: int, beta: float = 0.5) -> float:
    """Noise-term bound: ``sigma^2 sqrt(T) / c`` for ``beta = 1/2``, else ``sigma^2/(2c) * sum_t t^-beta``."""
    s2 = constants.sigma ** 2
    if beta == 0.5:
        return s2 * math.sqrt(T) / c
    return s2 / (2.0 * c) * float(np.sum(np.arange(1, T + 1, dtype=float) ** -beta))


def zplus_bound(c: float, R: float, beta: float, tau_bar: float, t, *, with_radius: bool = True) -> np.ndarray:
    """Bound on ``E[max(eta_t - eta_{t-1}, 0)]`` for ``t >= 2``.

    ``with_radius=False`` drops the ``R^2`` factor, which the derivation of
    this bound does not produce.
    """
    t = np.asarray(t, dtype=float)
    scale = c * beta * (tau_bar + 1.0) / (t - 1.0) ** (1.0 - beta)
    return scale * R ** 2 if with_radius else scale


@dataclass
class TheoremBound:
    value: float
    terms: dict[str, float]
    constants: dict[str, float]


def rate_constants(constants: ProblemConstants, model: DelayModel, c: float) -> dict[str, float]:
    """``D1, D2, D3`` (uniform delays) or ``D4, D5, D6`` (scaled delays)."""
    L, G, R, sigma = constants.L, constants.G, constants.R, constants.sigma
    tb, B2, theta = _delay_moments(model)
    if theta is None:
        return {
            "D1": math.sqrt(2.0) * c * R ** 2 * tb + sigma ** 2 / c,
            "D2": L * G ** 2 * (4 * tb + 3) * (tb + 1) / (6.0 * c ** 2),
            "D3": 0.5 * (L + c) * R ** 2 + tb * G * R + L * G ** 2 * tb * (tb + 1) * (2 * tb + 1) ** 2 / (6.0 * (L ** 2 + c ** 2)),
        }
    _check_theta(theta)
    return {
        "D4": c * R ** 2 * (tb + 1) / math.sqrt(2.0) + sigma ** 2 / c,
        "D5": G ** 2 * (B2 + tb + 1) / (c ** 2 * (1.0 - theta)),
        "D6": 0.5 * (L + c) * R ** 2 + G * R * (1.0 + math.pi ** 2 * B2 / 6.0),
    }


def _check_theta(theta):
    if not 0 < theta < 1:
        raise ValueError(f"scaled-delay bound needs theta in (0, 1), got {theta}")


def theorem_bound(constants: ProblemConstants, model: DelayModel, c: float, T: int, *, detail: bool = False):
    """Right-hand side bounding ``E[sum_{t<=T} f(x(t+1)) - f*]`` for step offsets ``c*sqrt(t + tau)``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    L, G, R, sigma = constants.L, constants.G, constants.R, constants.sigma
    tb, B2, theta = _delay_moments(model)
    D = rate_constants(constants, model, c)
    if theta is None:
        terms = {
            "sqrt_T": D["D1"] * math.sqrt(T),
            "log_T": D["D2"] * math.log(T),
            "constant": D["D3"],
        }
    else:
        t = np.arange(2, T + 1, dtype=float)
        tail, drift = _scaled_gamma_sums(constants, tb, B2, theta, c, T, 1.0)
        terms = {
            "noise": sigma ** 2 / c * math.sqrt(T),
            "distance": 0.5 * c * R ** 2 * float(np.sum((tb + 1.0) / np.sqrt(2.0 * t - 1.0))),
            "late_arrivals": tail,
            "staleness": drift,
            "constant": 0.5 * R ** 2 * (L + c),
        }
    value = float(sum(terms.values()))
    return TheoremBound(value, terms, D) if detail else value


# --------------------------------------------------------------------------- Monte Carlo bound checks


@dataclass
class LemmaCheck:
    name: str
    empirical: float
    bound: float
    stderr: float
    passed: bool
    n_seeds: int
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d


def _mean_se(samples: np.ndarray) -> tuple[float, float]:
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[0]
    se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else math.inf
    return float(samples.mean()), se


def _sum_check(name, per_seed, bound, k_se=3.0, **detail) -> LemmaCheck:
    mean, se = _mean_se(per_seed)
    return LemmaCheck(name, mean, float(bound), se, bool(mean <= bound + k_se * se), int(per_seed.size), detail)


def _termwise_check(name, per_step, bound, t, k_se=3.0, **detail) -> LemmaCheck:
    """Each column of ``per_step`` (seeds x steps) must satisfy its bound; reports the tightest step."""
    S = per_step.shape[0]
    mean = per_step.mean(axis=0)
    se = per_step.std(axis=0, ddof=1) / math.sqrt(S)
    bound = np.broadcast_to(np.asarray(bound, dtype=float), mean.shape)
    # the relative 1e-12 absorbs rounding when a bound is attained exactly with zero variance
    ok = mean <= bound + k_se * se + 1e-12 * np.abs(bound)
    ratio = np.where(bound > 0, mean / np.where(bound > 0, bound, 1.0), np.inf)
    i = int(np.argmax(ratio))
    return LemmaCheck(name, float(mean[i]), float(bound[i]), float(se[i]), bool(ok.all()), S,
                      {"t": int(t[i]), "steps_checked": int(mean.size), "steps_failed": int((~ok).sum()),
                       "max_ratio": float(ratio[i]), **detail})


def check_lemma_bounds(
    res: Residuals,
    constants: ProblemConstants | None,
    model: DelayModel,
    c: float,
    beta: float = 0.5,
    *,
    lemmas: Sequence[str] | None = None,
    k_se: float = 3.0,
    min_seeds: int = 50,
) -> dict[str, LemmaCheck]:
    """Compare Monte Carlo means with the closed-form expectation bounds.

    Available checks (defaults depend on the delay model and ``beta``):

    ``sigma``: sum of noise terms; ``delta_uniform`` / ``delta_scaled``: sum
    of distance terms; ``gamma_uniform`` / ``gamma_scaled``: sum of staleness
    terms; ``zplus`` and ``zplus_tight``: step-offset increments, term-wise;
    ``inv_eta``: ``E[1/eta_t]``, term-wise; ``lag_distance``: drift between
    the source iterate and ``x(t+1)``, term-wise.
    """
    if constants is None:
        raise ValueError("bound checks need the problem constants")
    if res.n_seeds < min_seeds:
        raise ValueError(f"need at least {min_seeds} seeds, got {res.n_seeds}")
    tb, B2, theta = _delay_moments(model)
    scaled = theta is not None
    T = res.T
    if lemmas is None:
        lemmas = ["sigma", "zplus", "zplus_tight", "inv_eta", "lag_distance"]
        if beta == 0.5:
            lemmas += ["delta_scaled", "gamma_scaled"] if scaled else ["delta_uniform", "gamma_uniform"]
    L, G, R = constants.L, constants.G, constants.R
    t = res.t
    out: dict[str, LemmaCheck] = {}
    for name in lemmas:
        if name == "sigma":
            out[name] = _sum_check(name, res.sigma_term.sum(axis=1), lemma_sigma(constants, c, T, beta), k_se)
        elif name == "delta_uniform":
            out[name] = _sum_check(name, res.delta.sum(axis=1), lemma_delta_uniform(constants, tb, c, T), k_se)
        elif name == "delta_scaled":
            out[name] = _sum_check(name, res.delta.sum(axis=1), lemma_delta_scaled(constants, tb, c, T), k_se)
        elif name == "gamma_uniform":
            out[name] = _sum_check(name, res.gamma.sum(axis=1), lemma_gamma_uniform(constants, tb, c, T), k_se)
        elif name == "gamma_scaled":
            _check_theta(theta)
            out[name] = _sum_check(name, res.gamma.sum(axis=1), lemma_gamma_scaled(constants, tb, B2, theta, c, T), k_se)
        elif name in ("zplus", "zplus_tight"):
            zp = np.maximum(res.z[:, 1:], 0.0)
            bound = zplus_bound(c, R, beta, tb, t[1:], with_radius=name == "zplus")
            out[name] = _termwise_check(name, zp, bound, t[1:], k_se)
        elif name == "inv_eta":
            out[name] = _termwise_check(name, 1.0 / res.eta, 1.0 / (c * t.astype(float) ** beta), t, k_se)
        elif name == "lag_distance":
            rhs = G ** 2 * (res.tau + 1.0) ** 2 / (L ** 2 + c ** 2 * (t - res.tau).astype(float) ** (2 * beta))
            diff = res.lag_dist - rhs
            chk = _termwise_check(name, diff, 0.0, t, k_se)
            i = int(np.argmax(diff.mean(axis=0)))
            chk.empirical, chk.bound = float(res.lag_dist[:, i].mean()), float(rhs[:, i].mean())
            chk.detail.update({"t": int(t[i]), "max_ratio": float(res.lag_dist[:, i].mean() / rhs[:, i].mean())})
            out[name] = chk
        else:
            raise ValueError(f"unknown lemma check {name!r}")
    return out


def cross_term_check(res: Residuals, times: Sequence[int], k_se: float = 4.0) -> list[dict]:
    """Mean of the zero-mean cross term at fixed ``t`` against ``k_se`` standard errors."""
    rows = []
    for t in times:
        v = res.cross[:, t - 1]
        mean, se = _mean_se(v)
        rows.append({"t": int(t), "mean": mean, "stderr": se, "z": mean / se if se > 0 else 0.0,
                     "pass": bool(abs(mean) <= k_se * se)})
    return rows


def write_report(checks: dict[str, LemmaCheck], path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: v.to_dict() for k, v in checks.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# --------------------------------------------------------------------------- rates


@dataclass
class RateFit:
    slope: float
    intercept: float
    ci_low: float
    ci_high: float
    T: np.ndarray
    mean_gap: np.ndarray

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "ci_low": self.ci_low, "ci_high": self.ci_high,
                "T": [int(v) for v in self.T], "mean_gap": [float(v) for v in self.mean_gap]}


def _loglog_slope(T, y) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(T), np.log(y), 1)
    return float(slope), float(intercept)


def fit_rate(T, gaps, *, n_boot: int = 2000, level: float = 0.95, seed=0) -> RateFit:
    """Least-squares slope of ``log(mean gap)`` against ``log(T)``.

    ``gaps`` is either the mean gap per ``T`` (shape ``(K,)``) or per-seed gaps
    (shape ``(S, K)``); in the latter case the confidence interval is a
    percentile bootstrap over seeds, otherwise it collapses to the point
    estimate.
    """
    T = np.asarray(T, dtype=float)
    gaps = np.asarray(gaps, dtype=float)
    if T.ndim != 1 or T.size < 3 or np.unique(T).size < 3:
        raise ValueError("rate fitting needs at least 3 distinct T values")
    if np.any(T <= 0) or math.log10(T.max() / T.min()) < 2 - 1e-12:
        raise ValueError("T values must be positive and span at least two decades")
    per_seed = gaps.ndim == 2
    if gaps.shape[-1] != T.size:
        raise ValueError("gap array does not match the T values")
    mean = gaps.mean(axis=0) if per_seed else gaps
    if np.any(mean <= 0):
        raise ValueError("mean gaps must be positive for a log-log fit")
    slope, intercept = _loglog_slope(T, mean)
    lo = hi = slope
    if per_seed and gaps.shape[0] > 1 and n_boot > 0:
        rng = np.random.default_rng(seed)
        S = gaps.shape[0]
        idx = rng.integers(0, S, size=(n_boot, S))
        boot_means = gaps[idx].mean(axis=1)
        logT = np.log(T)
        xc = logT - logT.mean()
        ly = np.log(np.maximum(boot_means, np.finfo(float).tiny))
        slopes = (ly - ly.mean(axis=1, keepdims=True)) @ xc / np.dot(xc, xc)
        a = (1.0 - level) / 2.0
        lo, hi = (float(v) for v in np.quantile(slopes, [a, 1.0 - a]))
    return RateFit(slope, intercept, lo, hi, T, mean)
