"""Shared numeric and bookkeeping types.

Vectors are either dense ``numpy.ndarray`` (float64) or :class:`SparseVector`.
All reals are float64 and feature indices are int64.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

INDEX_DTYPE = np.int64
REAL_DTYPE = np.float64


@dataclass(frozen=True)
class SparseVector:
    """Index/value pairs with strictly increasing indices.

    ``dim`` is optional; when set, every index must be below it.
    """

    indices: np.ndarray
    values: np.ndarray
    dim: int | None = None

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=INDEX_DTYPE).reshape(-1)
        val = np.asarray(self.values, dtype=REAL_DTYPE).reshape(-1)
        if idx.shape != val.shape:
            raise ValueError("indices and values must have the same length")
        if idx.size and (idx[0] < 0 or np.any(np.diff(idx) <= 0)):
            raise ValueError("sparse indices must be nonnegative and strictly increasing")
        if not np.all(np.isfinite(val)):
            raise ValueError("sparse vector has non-finite values")
        if self.dim is not None and idx.size and idx[-1] >= self.dim:
            raise ValueError(f"index {idx[-1]} out of range for dim {self.dim}")
        idx.setflags(write=False)
        val.setflags(write=False)
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    @classmethod
    def trusted(cls, indices: np.ndarray, values: np.ndarray, dim: int | None = None) -> "SparseVector":
        """Build without validation; callers guarantee sorted unique int64 indices and finite float64 values."""
        obj = object.__new__(cls)
        object.__setattr__(obj, "indices", indices)
        object.__setattr__(obj, "values", values)
        object.__setattr__(obj, "dim", dim)
        return obj

    @classmethod
    def from_dict(cls, items: dict[int, float], dim: int | None = None) -> "SparseVector":
        keys = sorted(items)
        return cls(np.array(keys, dtype=INDEX_DTYPE), np.array([items[k] for k in keys], dtype=REAL_DTYPE), dim)

    @classmethod
    def from_dense(cls, x) -> "SparseVector":
        x = np.asarray(x, dtype=REAL_DTYPE)
        idx = np.flatnonzero(x)
        return cls(idx, x[idx], x.size)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_dense(self, dim: int | None = None) -> np.ndarray:
        n = dim if dim is not None else self.dim
        if n is None:
            n = int(self.indices[-1]) + 1 if self.nnz else 0
        out = np.zeros(n, dtype=REAL_DTYPE)
        out[self.indices] = self.values
        return out

    def to_dict(self) -> dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}

    def __len__(self):
        return self.nnz


Vector = Union[np.ndarray, SparseVector]


def as_dense(x: Vector, dim: int | None = None) -> np.ndarray:
    if isinstance(x, SparseVector):
        return x.to_dense(dim)
    arr = np.asarray(x, dtype=REAL_DTYPE)
    if not np.all(np.isfinite(arr)):
        raise ValueError("vector has non-finite coordinates")
    return arr


def sparse_axpy(a: float, x: Vector, y: Vector) -> Vector:
    """Return ``a*x + y``; the sparsity pattern of the result is the union."""
    a = float(a)
    if isinstance(x, SparseVector) and isinstance(y, SparseVector):
        idx = np.union1d(x.indices, y.indices)
        out = np.zeros(idx.size, dtype=REAL_DTYPE)
        out[np.searchsorted(idx, y.indices)] = y.values
        pos = np.searchsorted(idx, x.indices)
        out[pos] = a * x.values + out[pos]
        dim = x.dim if x.dim is not None else y.dim
        return SparseVector(idx, out, dim)
    if isinstance(x, SparseVector):
        out = as_dense(y).copy()
        out[x.indices] = a * x.values + out[x.indices]
        return out
    if isinstance(y, SparseVector):
        xd = as_dense(x)
        out = a * xd
        out[y.indices] = out[y.indices] + y.values
        return out
    xd, yd = as_dense(x), as_dense(y)
    if xd.shape != yd.shape:
        raise ValueError(f"dimension mismatch: {xd.shape} vs {yd.shape}")
    return a * xd + yd


def l2_norm(x: Vector) -> float:
    vals = x.values if isinstance(x, SparseVector) else np.asarray(x, dtype=REAL_DTYPE)
    return float(math.sqrt(float(np.dot(vals, vals))))


@dataclass(frozen=True)
class DelaySample:
    """Delay ``tau`` of a gradient applied at time ``t`` and computed at ``t - tau``."""

    tau: int
    source_time: int

    def __post_init__(self):
        if self.tau < 0 or self.source_time < 1:
            raise ValueError(f"invalid delay sample {self}")


@dataclass(frozen=True)
class DelayedGradientMessage:
    gradient: Vector
    computed_at: int
    worker_id: int = 0
    minibatch_id: int = 0

    def __post_init__(self):
        if self.computed_at < 1:
            raise ValueError("computed_at must be >= 1")
        vals = self.gradient.values if isinstance(self.gradient, SparseVector) else self.gradient
        if not np.all(np.isfinite(vals)):
            raise ValueError("gradient has non-finite entries")


@dataclass(frozen=True)
class ProblemConstants:
    """Smoothness ``L``, gradient bound ``G``, domain radius ``R`` and noise level ``sigma``.

    ``sigma`` may be zero (noiseless oracle); the others must be positive.
    """

    L: float
    G: float
    R: float
    sigma: float

    def __post_init__(self):
        for name in ("L", "G", "R", "sigma"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0 or (v == 0 and name != "sigma"):
                raise ValueError(f"constant {name} must be positive and finite, got {v}")

    def to_dict(self) -> dict:
        return {"L": self.L, "G": self.G, "R": self.R, "sigma": self.sigma}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


BASE_COLUMNS = ("t", "tau", "eta", "alpha", "f_gap")
RESIDUAL_COLUMNS = ("delta", "gamma", "sigma_term")


@dataclass
class RunRecord:
    """Per-step log of one seeded run.

    ``f_gap[t-1]`` is ``f(x(t+1)) - f*`` (NaN where it was not evaluated).
    ``alpha`` is the logged step, equal to ``alpha0 / (L + eta)``; for
    coordinate-wise policies ``eta`` is the mean offset over the update's support.
    """

    t: np.ndarray
    tau: np.ndarray
    eta: np.ndarray
    alpha: np.ndarray
    f_gap: np.ndarray
    seed: int
    config: dict = field(default_factory=dict)
    x_bar: np.ndarray | None = None
    final_gap: float = math.nan
    last_gap: float = math.nan
    constants: ProblemConstants | None = None
    residuals: dict[str, np.ndarray] = field(default_factory=dict)
    trajectory: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=INDEX_DTYPE)
        self.tau = np.asarray(self.tau, dtype=INDEX_DTYPE)
        for name in ("eta", "alpha", "f_gap"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=REAL_DTYPE))
        n = self.t.size
        if any(getattr(self, c).size != n for c in BASE_COLUMNS):
            raise ValueError("RunRecord columns have different lengths")
        if n and not np.array_equal(self.t, np.arange(1, n + 1)):
            raise ValueError("RunRecord rows must be t = 1..T without gaps")

    def __len__(self):
        return int(self.t.size)

    @property
    def T(self) -> int:
        return len(self)

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def header(self) -> dict:
        return {
            "seed": int(self.seed),
            "config": self.config,
            "config_hash": self.config_hash,
            "T": self.T,
            "constants": self.constants.to_dict() if self.constants else None,
            "final_gap": _json_float(self.final_gap),
            "last_gap": _json_float(self.last_gap),
            "x_bar": None if self.x_bar is None else [float(v) for v in self.x_bar],
        }

    def write(self, directory: str | Path) -> Path:
        """Write ``record.csv`` and ``header.json`` (plus ``trajectory.npz`` if present)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cols = list(BASE_COLUMNS) + [c for c in RESIDUAL_COLUMNS if c in self.residuals]
        with open(directory / "record.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            data = [self.t, self.tau, self.eta, self.alpha, self.f_gap] + [self.residuals[c] for c in cols[5:]]
            for row in zip(*data):
                w.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])
        with open(directory / "header.json", "w", encoding="utf-8") as fh:
            json.dump(self.header(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        if self.trajectory:
            np.savez_compressed(directory / "trajectory.npz", **self.trajectory)
        return directory

    @classmethod
    def read(cls, directory: str | Path) -> "RunRecord":
        directory = Path(directory)
        with open(directory / "header.json", encoding="utf-8") as fh:
            head = json.load(fh)
        with open(directory / "record.csv", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        cols = rows[0]
        body = np.array(rows[1:], dtype=float).reshape(-1, len(cols))
        data = {c: body[:, i] for i, c in enumerate(cols)}
        traj = {}
        if (directory / "trajectory.npz").exists():
            with np.load(directory / "trajectory.npz") as npz:
                traj = {k: npz[k] for k in npz.files}
        consts = head.get("constants")
        return cls(
            t=data["t"].astype(INDEX_DTYPE),
            tau=data["tau"].astype(INDEX_DTYPE),
            eta=data["eta"],
            alpha=data["alpha"],
            f_gap=data["f_gap"],
            seed=head["seed"],
            config=head["config"],
            x_bar=None if head.get("x_bar") is None else np.array(head["x_bar"], dtype=REAL_DTYPE),
            final_gap=_from_json_float(head.get("final_gap")),
            last_gap=_from_json_float(head.get("last_gap")),
            constants=ProblemConstants(**consts) if consts else None,
            residuals={c: data[c] for c in RESIDUAL_COLUMNS if c in data},
            trajectory=traj,
        )


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _from_json_float(v):
    return math.nan if v is None else float(v)
