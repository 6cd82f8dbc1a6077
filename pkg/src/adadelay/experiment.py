"""Experiment configuration, multi-seed orchestration and report emission.

Configuration files are flat ``key = value`` text with ``#`` comments. Every
run seed is derived from the master seed and the seed index alone, so adding
seeds never changes existing runs, and every policy sees the same delays,
data order and oracle noise for a given seed index.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .delay import DelayModel, ScaledDelay, TraceDelay, TruncatedGaussianDelay, UniformDelay, replay_trace
from .engine import run
from .problems import LogisticProblem, make_logistic, make_synthetic, read_libsvm
from .simulator import TimeDistribution, inject_stragglers, make_workers, simulate
from .stepsize import POLICY_KINDS, alpha0_grid, make_policy

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ADADELAY_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


# --------------------------------------------------------------------------- seeds


def derive_seed(master: int, index: int) -> int:
    """Counter-based per-run seed: first 64-bit word of ``SeedSequence(master, spawn_key=(index,))``."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(index),))
    return int(ss.generate_state(1, np.uint64)[0])


def straggler_rng(seed: int) -> np.random.Generator:
    # fourth child of the run's seed sequence; the first three drive schedule, noise and minibatches
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(4)[3])


# --------------------------------------------------------------------------- config


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.replace(",", " ").split()]


def _ints(s: str) -> list[int]:
    out = []
    for v in s.replace(",", " ").split():
        f = float(v)
        if f != int(f):
            raise ValueError(f"{v} is not an integer")
        out.append(int(f))
    return out


def _strs(s: str) -> list[str]:
    return [v for v in s.replace(",", " ").split()]


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_str(s: str) -> str | None:
    return s or None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


@dataclass
class ExperimentConfig:
    """All experiment settings; see :data:`CONFIG_KEYS` for the file keys."""

    # problem
    problem: str = "synthetic"
    dim: int = 30
    sigma: float = 1.0
    radius: float = 10.0
    spectrum_min: float = 1e-6
    problem_seed: int = 0
    n_samples: int = 10_000
    nnz_per_row: int = 20
    test_samples: int = 0
    data: str | None = None
    test_data: str | None = None
    # policies
    policies: list[str] = field(default_factory=lambda: ["adadelay"])
    c: float = 1.0
    beta: float = 0.5
    L: float = 1.0
    alpha0: list[float] = field(default_factory=lambda: [1.0])
    c_bounds: list[float] = field(default_factory=list)
    warmup: int = 0
    # delays
    delay: str = "uniform"
    tau_bar: float = 5.0
    theta: float = 0.5
    B2: float = 50.0
    family: str = "geometric"
    delay_std: float = 1.0
    delay_cap: int = 100
    trace: str | None = None
    history: int = 0
    # simulator
    workers: int = 1
    straggler_fraction: float = 0.0
    straggler_factors: list[float] = field(default_factory=lambda: [1.0])
    service: str = "exponential"
    service_mean: float = 1.0
    read_mean: float = 1.0
    minibatch_size: int = 1
    # runs
    T: list[int] = field(default_factory=lambda: [1000])
    seeds: int = 1
    master_seed: int = 0
    metric: str = "avg_gap"
    gap_every: int = 0
    diagnostics: bool = False
    min_diag_seeds: int = 50
    output: str = "results"

    # ----- validation

    def validate(self, base_dir: str | Path | None = None) -> "ExperimentConfig":
        base = Path(base_dir) if base_dir is not None else Path.cwd()
        err = []
        if self.problem not in ("synthetic", "logistic", "libsvm"):
            err.append(f"problem must be synthetic, logistic or libsvm, not {self.problem!r}")
        if self.problem == "libsvm" and not self.data:
            err.append("problem = libsvm needs a data file")
        for key in ("data", "test_data", "trace"):
            path = getattr(self, key)
            if path and not self.resolve(path, base).exists():
                err.append(f"{key} file not found: {path}")
        if self.dim < 1:
            err.append("dim must be >= 1")
        if self.sigma < 0 or self.radius <= 0:
            err.append("sigma must be >= 0 and radius > 0")
        if not self.policies:
            err.append("policies must not be empty")
        for p in self.policies:
            if p not in POLICY_KINDS:
                err.append(f"unknown policy {p!r}; choose from {', '.join(POLICY_KINDS)}")
        if len(set(self.policies)) != len(self.policies):
            err.append("policies must be distinct")
        if not self.c > 0 or not 0 < self.beta < 1 or not self.L > 0:
            err.append("need c > 0, 0 < beta < 1 and L > 0")
        if not self.alpha0 or any(not a > 0 for a in self.alpha0):
            err.append("alpha0 values must be positive")
        if self.c_bounds and (len(self.c_bounds) != 2 or not 0 < self.c_bounds[0] <= self.c_bounds[1]):
            err.append("c_bounds must be two numbers 0 < M1 <= M2")
        if self.delay not in ("uniform", "scaled", "truncated_gaussian", "trace", "simulator"):
            err.append(f"unknown delay kind {self.delay!r}")
        if self.delay == "trace" and not self.trace:
            err.append("delay = trace needs a trace file")
        if self.workers < 1:
            err.append("workers must be >= 1")
        if not 0 <= self.straggler_fraction <= 1:
            err.append("straggler_fraction must lie in [0, 1]")
        if not self.straggler_factors or any(f < 1 for f in self.straggler_factors):
            err.append("straggler_factors must be a nonempty list of numbers >= 1")
        if self.service not in ("exponential", "deterministic", "lognormal"):
            err.append(f"unknown service distribution {self.service!r}")
        if not self.T or any(t < 1 for t in self.T):
            err.append("T values must be positive")
        if len(set(self.T)) != len(self.T):
            err.append("T values must be distinct")
        if self.seeds < 1:
            err.append("seeds must be >= 1")
        if self.metric not in ("avg_gap", "last_gap", "auc"):
            err.append("metric must be avg_gap, last_gap or auc")
        if self.metric == "auc" and not (self.test_samples or self.test_data):
            err.append("metric = auc needs a labelled test set (test_samples or test_data)")
        if self.minibatch_size < 1:
            err.append("minibatch_size must be >= 1")
        if self.diagnostics and self.problem != "synthetic":
            err.append("diagnostics need the synthetic problem")
        if err:
            raise ConfigError("; ".join(err))
        try:
            self.delay_model()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    @staticmethod
    def resolve(path: str, base: Path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else base / p

    # ----- component construction

    def delay_model(self, base_dir: Path | None = None) -> DelayModel | None:
        if self.delay == "uniform":
            if self.tau_bar != int(self.tau_bar):
                raise ValueError("uniform delays need an integer tau_bar")
            return UniformDelay(int(self.tau_bar))
        if self.delay == "scaled":
            return ScaledDelay(self.theta, self.tau_bar, self.B2, self.family)
        if self.delay == "truncated_gaussian":
            return TruncatedGaussianDelay(self.tau_bar, self.delay_std, self.delay_cap)
        if self.delay == "trace":
            if base_dir is None:
                return None
            return TraceDelay(replay_trace(self.resolve(self.trace, base_dir)))
        return None

    def build_problem(self, base_dir: Path):
        """Returns ``(problem, constants, test_set)``; ``test_set`` is ``(A, labels)`` or None."""
        if self.problem == "synthetic":
            prob, _, consts = make_synthetic(self.dim, self.sigma, self.radius, self.problem_seed,
                                             spectrum_min=self.spectrum_min)
            return prob, consts, None
        if self.problem == "logistic":
            full = make_logistic(self.n_samples + self.test_samples, self.dim, self.nnz_per_row, self.problem_seed)
            n = self.n_samples
            train = LogisticProblem(full.A[:n], full.labels[:n], name=full.name)
            test = (full.A[n:], full.labels[n:]) if self.test_samples else None
            return train, None, test
        ds = read_libsvm(self.resolve(self.data, base_dir))
        train = ds.to_problem()
        test = None
        if self.test_data:
            tds = read_libsvm(self.resolve(self.test_data, base_dir))
            # features unseen in training carry zero weight
            A = tds.matrix(max(train.dim, tds.dim)).tocsc()[:, :train.dim].tocsr()
            test = (A, tds.labels)
        return train, None, test

    def workers_for(self, seed: int):
        service = TimeDistribution(self.service, self.service_mean)
        read = TimeDistribution(self.service, self.read_mean)
        ws = make_workers(self.workers, service=service, read=read, minibatch_size=self.minibatch_size)
        if self.straggler_fraction > 0:
            ws = inject_stragglers(ws, self.straggler_fraction, self.straggler_factors, straggler_rng(seed))
        return ws

    def policy(self, kind: str, dim: int, alpha0: float):
        return make_policy(kind, dim, L=self.L, alpha0=alpha0, c=self.c, beta=self.beta,
                           c_bounds=tuple(self.c_bounds) if self.c_bounds else None, warmup=self.warmup)

    # ----- serialisation

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_fmt(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


_PARSERS = {
    "problem": str, "dim": int, "sigma": float, "radius": float, "spectrum_min": float, "problem_seed": int,
    "n_samples": int, "nnz_per_row": int, "test_samples": int, "data": _opt_str, "test_data": _opt_str,
    "policies": _strs, "c": float, "beta": float, "L": float, "alpha0": _floats, "c_bounds": _floats,
    "warmup": int, "delay": str, "tau_bar": float, "theta": float, "B2": float, "family": str,
    "delay_std": float, "delay_cap": int, "trace": _opt_str, "history": int, "workers": int,
    "straggler_fraction": float, "straggler_factors": _floats, "service": str, "service_mean": float,
    "read_mean": float, "minibatch_size": int, "T": _ints, "seeds": int, "master_seed": int, "metric": str,
    "gap_every": int, "diagnostics": _bool, "min_diag_seeds": int, "output": str,
}
CONFIG_KEYS = tuple(_PARSERS)


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines. ``alpha0 = grid`` (or ``grid:N``) expands to the log grid on [1e-4, 1]."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in _PARSERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            if key == "alpha0" and val.startswith("grid"):
                n = int(val.split(":", 1)[1]) if ":" in val else 9
                values[key] = alpha0_grid(n)
            else:
                values[key] = _PARSERS[key](val) if _PARSERS[key] is not int else _ints(val)[0]
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r} ({exc})") from None
    return ExperimentConfig(**values)


def load_config(path, validate: bool = True) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = parse_config(text)
    return cfg.validate(path.parent) if validate else cfg


def write_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(cfg.to_text(), encoding="utf-8")
    return path


def output_root(cfg: ExperimentConfig, base_dir: Path | None = None) -> Path:
    env = os.environ.get(OUTPUT_ROOT_ENV)
    if env:
        return Path(env)
    return ExperimentConfig.resolve(cfg.output, base_dir or Path.cwd())


# --------------------------------------------------------------------------- metrics


def compute_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based ROC AUC; tied scores get half credit."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and of equal length")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    n_pos = int(np.count_nonzero(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    ranks = rankdata(s)  # midranks
    u = float(ranks[y == 1].sum()) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def _mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    if v.size == 1:
        return float(v[0]), math.nan
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


# --------------------------------------------------------------------------- orchestration


RUN_COLUMNS = ("policy", "alpha0", "T", "seed_index", "seed", "avg_gap", "last_gap", "auc", "mean_tau")
SUMMARY_COLUMNS = ("policy", "alpha0", "T", "n", "mean_gap", "stderr_gap", "median_gap", "mean_auc", "stderr_auc",
                   "best")


@dataclass
class ExperimentResult:
    directory: Path
    runs: list[dict]
    summary: list[dict]


def _run_one(cfg: ExperimentConfig, problem, consts, test, delay_model, kind, alpha0, T, seed, traj):
    policy = cfg.policy(kind, problem.dim, alpha0)
    run_cfg = {**{k: v for k, v in cfg.to_dict().items() if k not in ("policies", "alpha0", "T")},
               "policy": kind, "alpha0": alpha0, "T": T}
    if cfg.delay == "simulator":
        record, _ = simulate(cfg.workers_for(seed), problem, policy, T, seed, gap_every=cfg.gap_every,
                             record_trajectory=traj, config=run_cfg)
    else:
        record = run(problem, policy, delay_model, T, seed, batch_size=cfg.minibatch_size,
                     history=cfg.history or None, gap_every=cfg.gap_every, record_trajectory=traj,
                     constants=consts, config=run_cfg)
    record.constants = consts
    auc = math.nan
    if test is not None:
        A, labels = test
        auc = compute_auc(A @ record.extra["server"].x, labels)
    return record, auc


def run_experiment(cfg: ExperimentConfig, base_dir: str | Path | None = None, *, save_records: bool = True) -> ExperimentResult:
    """Run every (policy, alpha0, T, seed) combination and write the reports.

    Output layout::

        config.txt            normalised copy of the configuration
        runs/<policy>/a<alpha0>/T<T>/seed<k>/   one RunRecord per run
        runs.csv              one row per run
        summary.csv           per (policy, alpha0, T) aggregates, best alpha0 flagged
        best.csv              best-alpha0 rows only
        plots/*.csv           plot-ready series
        diagnostics.json      lemma checks (when enabled)
    """
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    cfg.validate(base)
    out = output_root(cfg, base)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.txt")
    problem, consts, test = cfg.build_problem(base)
    delay_model = cfg.delay_model(base)
    seeds = [derive_seed(cfg.master_seed, k) for k in range(cfg.seeds)]
    rows = []
    residual_inputs: dict[tuple, list] = {}
    for kind in cfg.policies:
        for alpha0 in cfg.alpha0:
            for T in cfg.T:
                for k, seed in enumerate(seeds):
                    want_traj = cfg.diagnostics and kind == "adadelay"
                    record, auc = _run_one(cfg, problem, consts, test, delay_model, kind, alpha0, T, seed, want_traj)
                    if save_records:
                        record.write(out / "runs" / kind / f"a{alpha0:.6g}" / f"T{T}" / f"seed{k}")
                    if want_traj:
                        residual_inputs.setdefault((kind, alpha0, T), []).append(record)
                    rows.append({
                        "policy": kind, "alpha0": alpha0, "T": T, "seed_index": k, "seed": seed,
                        "avg_gap": record.final_gap, "last_gap": record.last_gap, "auc": auc,
                        "mean_tau": float(record.tau.mean()) if len(record) else math.nan,
                    })
                log.info("finished policy=%s alpha0=%g T=%d", kind, alpha0, T)
    summary = summarize(rows, cfg.metric)
    write_csv(out / "runs.csv", RUN_COLUMNS, rows)
    write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    write_csv(out / "best.csv", SUMMARY_COLUMNS, [r for r in summary if r["best"]])
    emit_plots_data(summary, out / "plots")
    if residual_inputs:
        report = diagnose_records(residual_inputs, problem, consts, delay_model, cfg)
        with open(out / "diagnostics.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return ExperimentResult(out, rows, summary)


def diagnose_records(groups: dict, problem, consts, delay_model, cfg: ExperimentConfig) -> dict:
    from .diagnostics import check_lemma_bounds, compute_residuals

    report = {}
    for (kind, alpha0, T), records in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        key = f"{kind}/a{alpha0:.6g}/T{T}"
        x = np.stack([r.trajectory["x"] for r in records])
        src = np.stack([r.trajectory["src"] for r in records])
        g = np.stack([r.trajectory["g"] for r in records])
        eta = np.stack([r.eta for r in records])
        alpha = np.stack([r.alpha for r in records])
        res = compute_residuals(problem, x, src, g, eta, alpha)
        entry = {
            "seeds": len(records),
            "identity_max_rel_error": float(res.identity_residual().max()),
            "inequality_holds": bool(res.inequality_holds().all()),
        }
        if alpha0 != 1.0:
            entry["note"] = "bounds assume alpha0 = 1; lemma checks skipped"
        elif len(records) < cfg.min_diag_seeds:
            entry["note"] = f"fewer than {cfg.min_diag_seeds} seeds; lemma checks skipped"
        elif delay_model is None or not isinstance(delay_model, (UniformDelay, ScaledDelay)):
            entry["note"] = "no closed-form bounds for this delay model"
        else:
            checks = check_lemma_bounds(res, consts, delay_model, cfg.c, cfg.beta, min_seeds=cfg.min_diag_seeds)
            entry["lemmas"] = {k: v.to_dict() for k, v in checks.items()}
        report[key] = entry
    return report


def summarize(rows: list[dict], metric: str = "avg_gap") -> list[dict]:
    """Aggregate per (policy, alpha0, T); flag the best alpha0 per (policy, T).

    Best is the smallest mean gap (largest mean AUC for ``metric = auc``);
    ties go to the smaller alpha0.
    """
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["policy"], r["alpha0"], r["T"]), []).append(r)
    gap_key = "last_gap" if metric == "last_gap" else "avg_gap"
    summary = []
    for (policy, alpha0, T), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], kv[0][2], kv[0][1])):
        gaps = [r[gap_key] for r in rs]
        aucs = [r["auc"] for r in rs if not math.isnan(r["auc"])]
        mg, sg = _mean_stderr(gaps)
        ma, sa = _mean_stderr(aucs)
        summary.append({"policy": policy, "alpha0": alpha0, "T": T, "n": len(rs), "mean_gap": mg,
                        "stderr_gap": sg, "median_gap": float(np.median(gaps)), "mean_auc": ma,
                        "stderr_auc": sa, "best": False})
    by_pt: dict[tuple, list[dict]] = {}
    for s in summary:
        by_pt.setdefault((s["policy"], s["T"]), []).append(s)
    for cands in by_pt.values():
        if metric == "auc":
            best = min(cands, key=lambda s: (-s["mean_auc"], s["alpha0"]))
        else:
            best = min(cands, key=lambda s: (s["mean_gap"], s["alpha0"]))
        best["best"] = True
    return summary


def _cell(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Sequence[dict], comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r[c]) for c in columns])
    return path


def read_csv(path) -> list[dict]:
    """Read a CSV written by :func:`write_csv`, skipping ``#`` comment lines and converting numbers."""
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for r in csv.DictReader(lines):
        row = {}
        for k, v in r.items():
            try:
                f = float(v)
                row[k] = int(f) if k in ("T", "n", "seed_index", "seed") else f
            except ValueError:
                row[k] = v
        if "best" in row:
            row["best"] = bool(row["best"])
        out.append(row)
    return out


PLOT_FILES = {
    "gap_vs_T.csv": (
        ("policy", "T", "alpha0", "mean_gap", "stderr_gap", "mean_auc"),
        "gap against the number of updates T, one series per policy at its best alpha0\n"
        "columns: policy, T, alpha0 (best for that T), mean_gap, stderr_gap, mean_auc (nan without a test set)",
        True,
    ),
    "gap_vs_alpha0.csv": (
        ("policy", "T", "alpha0", "mean_gap", "stderr_gap", "mean_auc"),
        "gap against the step multiplier alpha0, one series per (policy, T)\n"
        "columns: policy, T, alpha0, mean_gap, stderr_gap, mean_auc (nan without a test set)",
        False,
    ),
}


def emit_plots_data(summary: Sequence[dict], directory) -> list[Path]:
    """One CSV per figure analogue; header comments document the columns."""
    directory = Path(directory)
    paths = []
    for name, (cols, comment, best_only) in PLOT_FILES.items():
        rows = [r for r in summary if r["best"]] if best_only else list(summary)
        rows = sorted(rows, key=lambda r: (r["policy"], r["T"], r["alpha0"]))
        paths.append(write_csv(directory / name, cols, rows, comment))
    return paths
