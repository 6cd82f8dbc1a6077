"""Objectives, stochastic gradient oracles, projections and libsvm ingestion."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import sparse

from .core import REAL_DTYPE, INDEX_DTYPE, ProblemConstants, SparseVector, Vector, as_dense

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------- projections


class ProjectionSet:
    """Closed convex set with a Euclidean projection.

    Subclasses implement :meth:`project_rows`, which projects every row of a
    2-d array. Single-vector projection goes through the same code so that
    batched and single runs agree bit for bit.
    """

    kind = "abstract"

    def project_rows(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def project(self, x: Vector) -> np.ndarray:
        x = as_dense(x)
        return self.project_rows(x[None, :])[0]

    def contains(self, x: Vector, tol: float = 0.0) -> bool:
        raise NotImplementedError

    def max_distance_from(self, point: np.ndarray) -> float:
        """Largest distance from ``point`` to any element of the set."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class Unconstrained(ProjectionSet):
    kind = "unconstrained"

    def project_rows(self, X):
        return np.array(X, dtype=REAL_DTYPE, copy=True)

    def contains(self, x, tol=0.0):
        return True

    def max_distance_from(self, point):
        return math.inf


def _row_norms(D: np.ndarray) -> np.ndarray:
    # one norm routine for both the membership test and the projection keeps them consistent
    return np.sqrt(np.einsum("ij,ij->i", D, D))


@dataclass
class L2Ball(ProjectionSet):
    radius: float
    center: np.ndarray | None = None
    kind = "l2_ball"

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")

    def _center(self, dim):
        return np.zeros(dim) if self.center is None else np.asarray(self.center, dtype=REAL_DTYPE)

    def project_rows(self, X):
        X = np.array(X, dtype=REAL_DTYPE, copy=True)
        c = self._center(X.shape[1])
        D = X - c
        norms = _row_norms(D)
        out = norms > self.radius
        if not out.any():
            return X
        for i in np.flatnonzero(out):
            # shrink until the rounded result is inside, so projection is idempotent
            s = self.radius / norms[i]
            y = c + D[i] * s
            while _row_norms((y - c)[None, :])[0] > self.radius:
                s = np.nextafter(s, 0.0)
                y = c + D[i] * s
            X[i] = y
        return X

    def contains(self, x, tol=0.0):
        x = as_dense(x)
        e = x - self._center(x.size)
        return bool(_row_norms(e[None, :])[0] <= self.radius + tol)

    def max_distance_from(self, point):
        point = np.asarray(point, dtype=REAL_DTYPE)
        e = point - self._center(point.size)
        return self.radius + math.sqrt(float(np.dot(e, e)))

    def to_dict(self):
        return {
            "kind": self.kind,
            "radius": self.radius,
            "center": None if self.center is None else [float(v) for v in self.center],
        }


@dataclass
class Box(ProjectionSet):
    lower: float | np.ndarray
    upper: float | np.ndarray
    kind = "box"

    def __post_init__(self):
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError("box lower bound exceeds upper bound")

    def project_rows(self, X):
        return np.clip(np.asarray(X, dtype=REAL_DTYPE), self.lower, self.upper)

    def contains(self, x, tol=0.0):
        x = as_dense(x)
        return bool(np.all(x >= np.asarray(self.lower) - tol) and np.all(x <= np.asarray(self.upper) + tol))

    def max_distance_from(self, point):
        point = np.asarray(point, dtype=REAL_DTYPE)
        lo = np.broadcast_to(self.lower, point.shape)
        hi = np.broadcast_to(self.upper, point.shape)
        far = np.maximum(np.abs(point - lo), np.abs(hi - point))
        return float(np.sqrt(np.dot(far, far)))

    def to_dict(self):
        return {"kind": self.kind, "lower": np.asarray(self.lower).tolist(), "upper": np.asarray(self.upper).tolist()}


def project(projection: ProjectionSet, x: Vector) -> np.ndarray:
    return projection.project(x)


# --------------------------------------------------------------------------- objectives


@dataclass
class QuadraticProblem:
    """``f(x) = 1/2 sum_j curvature_j (x_j - x*_j)^2`` with additive Gaussian oracle noise.

    The noise is isotropic with ``E||noise||^2 = sigma^2`` per single-sample draw;
    a minibatch of ``b`` draws averages them.
    """

    curvature: np.ndarray
    x_star: np.ndarray
    sigma: float = 0.0
    domain: ProjectionSet = field(default_factory=Unconstrained)
    kind = "quadratic_synthetic"
    f_star = 0.0

    def __post_init__(self):
        self.curvature = np.asarray(self.curvature, dtype=REAL_DTYPE)
        self.x_star = np.asarray(self.x_star, dtype=REAL_DTYPE)
        if self.curvature.shape != self.x_star.shape or np.any(self.curvature < 0):
            raise ValueError("curvature must be nonnegative and match x_star")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def dim(self) -> int:
        return self.x_star.size

    @property
    def L(self) -> float:
        return float(self.curvature.max())

    @property
    def noise_scale(self) -> float:
        return self.sigma / math.sqrt(self.dim)

    def value(self, x: Vector) -> float:
        return float(self.value_rows(as_dense(x, self.dim)[None, :])[0])

    def value_rows(self, X: np.ndarray) -> np.ndarray:
        E = X - self.x_star
        return 0.5 * np.einsum("ij,ij->i", E * self.curvature, E)

    def gradient(self, x: Vector) -> np.ndarray:
        return self.curvature * (as_dense(x, self.dim) - self.x_star)

    def gradient_rows(self, X: np.ndarray) -> np.ndarray:
        return self.curvature * (X - self.x_star)

    def stochastic_gradient(self, x: Vector, batch=None, rng: np.random.Generator | None = None) -> np.ndarray:
        g = self.gradient(x)
        if self.sigma == 0:
            return g
        if rng is None:
            raise ValueError("a noisy oracle needs an rng stream")
        b = 1 if batch is None else len(batch)
        if b < 1:
            raise ValueError("batch must be nonempty")
        if b == 1:
            return g + rng.standard_normal(self.dim) * self.noise_scale
        return g + rng.standard_normal((b, self.dim)).mean(axis=0) * self.noise_scale

    def sample_batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.zeros(size, dtype=INDEX_DTYPE)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dim": self.dim, "sigma": self.sigma, "L": self.L}


def _sigmoid(z):
    # split form avoids overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class LogisticProblem:
    """Empirical logistic loss ``(1/n) sum_i log(1 + exp(a_i.w)) - y_i a_i.w`` (+ optional ridge).

    Labels are in {0, 1}. Minibatch gradients are returned sparse when there
    is no ridge term.
    """

    kind = "logistic"
    f_star = None

    def __init__(self, A, labels, l2: float = 0.0, domain: ProjectionSet | None = None, name: str = "logistic"):
        A = sparse.csr_matrix(A, dtype=REAL_DTYPE)
        A.sum_duplicates()
        A.sort_indices()
        labels = np.asarray(labels, dtype=REAL_DTYPE)
        if labels.size != A.shape[0]:
            raise ValueError("label count does not match row count")
        if labels.size and not np.all((labels == 0) | (labels == 1)):
            raise ValueError("labels must be 0/1")
        self.A = A
        self.labels = labels
        self.l2 = float(l2)
        self.domain = domain if domain is not None else Unconstrained()
        self.name = name
        self._rows_idx = [A.indices[A.indptr[i]:A.indptr[i + 1]].astype(INDEX_DTYPE) for i in range(A.shape[0])]
        self._rows_val = [A.data[A.indptr[i]:A.indptr[i + 1]] for i in range(A.shape[0])]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def n_samples(self) -> int:
        return self.A.shape[0]

    def margins(self, w: Vector) -> np.ndarray:
        return self.A @ as_dense(w, self.dim)

    def value(self, w: Vector) -> float:
        w = as_dense(w, self.dim)
        z = self.A @ w
        loss = np.logaddexp(0.0, z) - self.labels * z
        return float(loss.mean()) + 0.5 * self.l2 * float(np.dot(w, w))

    def gradient(self, w: Vector) -> np.ndarray:
        w = as_dense(w, self.dim)
        r = _sigmoid(self.A @ w) - self.labels
        return (self.A.T @ r) / self.n_samples + self.l2 * w

    def smoothness_bound(self) -> float:
        """Upper bound on the gradient Lipschitz constant: ``0.25 * max_row ||a_i||^2 + l2``."""
        sq = np.asarray(self.A.multiply(self.A).sum(axis=1)).ravel()
        return 0.25 * float(sq.max(initial=0.0)) + self.l2

    def sample_batch(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.integers(0, self.n_samples, size=size)

    def batch_support(self, batch) -> np.ndarray:
        return np.unique(np.concatenate([self._rows_idx[i] for i in batch]))

    def stochastic_gradient(self, w: Vector, batch, rng=None) -> Vector:
        """Mean gradient over the rows in ``batch`` (sampled with replacement)."""
        batch = np.asarray(batch, dtype=INDEX_DTYPE).reshape(-1)
        if batch.size == 0:
            raise ValueError("batch must be nonempty")
        if batch.min() < 0 or batch.max() >= self.n_samples:
            raise IndexError("sample id out of range")
        if self.l2 == 0 and batch.size == 1:
            # single-row fast path: the row's indices are already sorted and unique
            i = int(batch[0])
            idx, val = self._rows_idx[i], self._rows_val[i]
            wv = w.to_dense(self.dim)[idx] if isinstance(w, SparseVector) else w[idx]
            z = float(np.dot(wv, val))
            r = (1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))) - self.labels[i]
            return SparseVector.trusted(idx, r * val, self.dim)
        idx = np.concatenate([self._rows_idx[i] for i in batch])
        val = np.concatenate([self._rows_val[i] for i in batch])
        row_of = np.repeat(np.arange(batch.size), [self._rows_idx[i].size for i in batch])
        if isinstance(w, SparseVector):
            w = w.to_dense(self.dim)
        z = np.bincount(row_of, weights=w[idx] * val, minlength=batch.size)
        r = _sigmoid(z) - self.labels[batch]
        support, inv = np.unique(idx, return_inverse=True)
        gvals = np.bincount(inv, weights=r[row_of] * val, minlength=support.size) / batch.size
        if self.l2:
            g = np.zeros(self.dim)
            g[support] = gvals
            return g + self.l2 * w
        return SparseVector.trusted(support, gvals, self.dim)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "name": self.name, "n": self.n_samples, "dim": self.dim, "l2": self.l2}


def stochastic_gradient(obj, x: Vector, batch, rng_stream=None) -> Vector:
    return obj.stochastic_gradient(x, batch, rng_stream)


def full_objective(obj, x: Vector) -> float:
    return obj.value(x)


# --------------------------------------------------------------------------- generators


def make_synthetic(
    dim: int,
    sigma: float,
    R: float,
    seed=0,
    *,
    spectrum_min: float = 1e-6,
    x_star_norm: float = 1.0,
) -> tuple[QuadraticProblem, np.ndarray, ProblemConstants]:
    """Quadratic instance with a known minimizer inside the ball of radius ``R`` at the origin.

    Curvatures are geometrically spaced from 1 down to ``spectrum_min`` so
    that ``L = 1`` and the problem behaves like a generic smooth convex
    objective over several decades of iteration counts. ``x_star`` has equal
    magnitude coordinates with seeded random signs.

    The returned constants use ``R + ||x*||`` as the radius (largest distance
    from ``x*`` to the domain) and ``G = L * (R + ||x*||)``.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if not 0 < spectrum_min <= 1:
        raise ValueError("spectrum_min must lie in (0, 1]")
    if x_star_norm >= R:
        raise ValueError(f"R={R} is too small to contain x_star with norm {x_star_norm}")
    rng = np.random.default_rng(seed)
    signs = rng.choice([-1.0, 1.0], size=dim)
    x_star = signs * (x_star_norm / math.sqrt(dim))
    curvature = np.geomspace(1.0, spectrum_min, dim)
    domain = L2Ball(R)
    problem = QuadraticProblem(curvature, x_star, sigma, domain)
    radius = domain.max_distance_from(x_star)
    consts = ProblemConstants(L=problem.L, G=problem.L * radius, R=radius, sigma=sigma)
    return problem, x_star, consts


def make_logistic(
    n: int = 10_000,
    dim: int = 1_000,
    nnz_per_row: int = 20,
    seed=0,
    *,
    zipf: float = 1.0,
    weight_scale: float = 3.0,
) -> LogisticProblem:
    """Sparse binary-feature logistic dataset with Zipf-distributed feature popularity.

    Rows have ``nnz_per_row`` distinct active features scaled to unit norm;
    labels are drawn from the logistic model of a random ground-truth weight
    vector, so the data are not separable.
    """
    rng = np.random.default_rng(seed)
    pop = 1.0 / np.arange(1, dim + 1) ** zipf
    pop /= pop.sum()
    perm = rng.permutation(dim)
    indptr = np.arange(0, (n + 1) * nnz_per_row, nnz_per_row)
    indices = np.empty(n * nnz_per_row, dtype=INDEX_DTYPE)
    for i in range(n):
        cols = perm[rng.choice(dim, size=nnz_per_row, replace=False, p=pop)]
        indices[i * nnz_per_row:(i + 1) * nnz_per_row] = np.sort(cols)
    data = np.full(indices.size, 1.0 / math.sqrt(nnz_per_row))
    A = sparse.csr_matrix((data, indices, indptr), shape=(n, dim))
    w_true = rng.standard_normal(dim) * weight_scale
    p = _sigmoid(A @ w_true)
    labels = (rng.random(n) < p).astype(REAL_DTYPE)
    return LogisticProblem(A, labels, name=f"synthetic-logistic-{n}x{dim}")


# --------------------------------------------------------------------------- f* oracle


@dataclass
class FstarEstimate:
    value: float
    converged: bool
    iterations: int
    x: np.ndarray
    trace: np.ndarray


def estimate_fstar(
    obj,
    projection: ProjectionSet | None = None,
    budget: int = 20_000,
    tol: float = 1e-9,
    x0: np.ndarray | None = None,
) -> FstarEstimate:
    """Upper-bound estimate of ``min_X f`` by projected full-gradient descent.

    Uses backtracking on the smoothness constant, so the objective trace is
    monotone nonincreasing. Stops when the gradient-mapping norm drops below
    ``tol``; on budget exhaustion the best value is returned with
    ``converged=False``.
    """
    projection = projection if projection is not None else getattr(obj, "domain", Unconstrained())
    x = projection.project(np.zeros(obj.dim) if x0 is None else x0)
    fx = obj.value(x)
    Lk = getattr(obj, "L", None) or 1.0
    if hasattr(obj, "smoothness_bound"):
        Lk = obj.smoothness_bound()
    trace = [fx]
    converged = False
    it = 0
    for it in range(1, budget + 1):
        g = obj.gradient(x)
        while True:
            x_new = projection.project(x - g / Lk)
            d = x_new - x
            f_new = obj.value(x_new)
            if f_new <= fx + float(np.dot(g, d)) + 0.5 * Lk * float(np.dot(d, d)) + 1e-15 * abs(fx):
                break
            Lk *= 2.0
        step_norm = Lk * math.sqrt(float(np.dot(d, d)))
        if f_new <= fx:
            x, fx = x_new, f_new
        trace.append(fx)
        if step_norm <= tol:
            converged = True
            break
        Lk *= 0.9
    if not converged:
        log.warning("estimate_fstar: budget %d exhausted, returning best value %.12g", budget, fx)
    return FstarEstimate(fx, converged, it, x, np.array(trace))


# --------------------------------------------------------------------------- libsvm


class LibsvmFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def iter_libsvm(path, zero_based: bool = False) -> Iterator[tuple[int, float, np.ndarray, np.ndarray]]:
    """Yield ``(lineno, label, indices, values)`` per row; indices as written in the file.

    Labels -1/+1 are mapped to 0/1. Blank lines and ``#`` comments are skipped.
    """
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                label = float(parts[0])
            except ValueError:
                raise LibsvmFormatError(lineno, f"non-numeric label {parts[0]!r}") from None
            if label == -1.0:
                label = 0.0
            elif label not in (0.0, 1.0):
                raise LibsvmFormatError(lineno, f"label {parts[0]!r} not in {{0,1}} or {{-1,+1}}")
            idx = np.empty(len(parts) - 1, dtype=INDEX_DTYPE)
            val = np.empty(len(parts) - 1, dtype=REAL_DTYPE)
            for k, tok in enumerate(parts[1:]):
                i, sep, v = tok.partition(":")
                try:
                    idx[k] = int(i)
                    val[k] = float(v)
                except ValueError:
                    raise LibsvmFormatError(lineno, f"malformed feature {tok!r}") from None
                if not sep:
                    raise LibsvmFormatError(lineno, f"malformed feature {tok!r}")
            if idx.size and (idx.min() < (0 if zero_based else 1)):
                raise LibsvmFormatError(lineno, "feature index below the index base")
            if np.any(np.diff(idx) <= 0):
                raise LibsvmFormatError(lineno, "feature indices are not strictly increasing")
            if not np.all(np.isfinite(val)):
                raise LibsvmFormatError(lineno, "non-finite feature value")
            yield lineno, label, idx, val


@dataclass
class LibsvmDataset:
    path: Path
    labels: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    max_index: int
    zero_based: bool = False

    @property
    def n_rows(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        if self.max_index < 0:
            return 0
        return self.max_index + 1 if self.zero_based else self.max_index

    def matrix(self, dim: int | None = None):
        cols = self.indices if self.zero_based else self.indices - 1
        return sparse.csr_matrix((self.data, cols, self.indptr), shape=(self.n_rows, dim or self.dim))

    def to_problem(self, dim: int | None = None, l2: float = 0.0, domain=None) -> LogisticProblem:
        return LogisticProblem(self.matrix(dim), self.labels, l2=l2, domain=domain, name=Path(self.path).name)


def read_libsvm(path, zero_based: bool = False) -> LibsvmDataset:
    """Parse a libsvm file in one pass, recording row count and maximum index."""
    labels, idx_parts, val_parts, indptr = [], [], [], [0]
    max_index = -1
    for _, label, idx, val in iter_libsvm(path, zero_based):
        labels.append(label)
        idx_parts.append(idx)
        val_parts.append(val)
        indptr.append(indptr[-1] + idx.size)
        if idx.size:
            max_index = max(max_index, int(idx[-1]))
    cat = (lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.empty(0, dtype=dt))
    return LibsvmDataset(
        path=Path(path),
        labels=np.array(labels, dtype=REAL_DTYPE),
        indptr=np.array(indptr, dtype=INDEX_DTYPE),
        indices=cat(idx_parts, INDEX_DTYPE),
        data=cat(val_parts, REAL_DTYPE),
        max_index=max_index,
        zero_based=zero_based,
    )


def write_libsvm(path, A, labels, zero_based: bool = False) -> None:
    A = sparse.csr_matrix(A)
    base = 0 if zero_based else 1
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(A.shape[0]):
            lo, hi = A.indptr[i], A.indptr[i + 1]
            feats = " ".join(f"{j + base}:{float(v)!r}" for j, v in zip(A.indices[lo:hi], A.data[lo:hi]))
            fh.write(f"{int(labels[i])} {feats}".rstrip() + "\n")
