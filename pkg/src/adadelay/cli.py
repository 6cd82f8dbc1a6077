"""Command-line entry point: ``adadelay <subcommand> ...``.

Exit codes: 0 on success, 1 on runtime failure, 2 on invalid configuration
or arguments.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import RunRecord
from .delay import write_trace
from .experiment import (
    ConfigError,
    ExperimentConfig,
    compute_auc,
    derive_seed,
    diagnose_records,
    load_config,
    output_root,
    read_csv,
    run_experiment,
)

log = logging.getLogger("adadelay")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg.output = args.output
    result = run_experiment(cfg, Path(args.config).parent)
    print(result.directory)
    return 0


def _find_runs(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.rglob("header.json") if (p.parent / "record.csv").exists())


def _cmd_diagnose(args) -> int:
    root = Path(args.run_dir)
    dirs = _find_runs(root)
    if not dirs:
        raise ConfigError(f"no run records under {root}")
    groups: dict[tuple, list[RunRecord]] = {}
    cfg = None
    names = {f.name for f in fields(ExperimentConfig)}
    for d in dirs:
        rec = RunRecord.read(d)
        if "x" not in rec.trajectory:
            log.info("skipping %s: no trajectory recorded", d)
            continue
        rc = rec.config
        if cfg is None:
            cfg = ExperimentConfig(**{k: v for k, v in rc.items() if k in names and k not in ("policies", "alpha0", "T")})
        groups.setdefault((rc["policy"], float(rc["alpha0"]), int(rc["T"])), []).append(rec)
    if not groups:
        raise ConfigError("no run under this directory has a recorded trajectory (enable diagnostics)")
    if args.min_seeds is not None:
        cfg.min_diag_seeds = args.min_seeds
    problem, consts, _ = cfg.build_problem(Path.cwd())
    report = diagnose_records(groups, problem, consts, cfg.delay_model(Path.cwd()), cfg)
    out = Path(args.out) if args.out else root / "diagnostics.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(out)
    return 0


def _cmd_ratefit(args) -> int:
    from .diagnostics import fit_rate

    summary = read_csv(args.summary)
    runs_path = Path(args.runs) if args.runs else Path(args.summary).with_name("runs.csv")
    runs = read_csv(runs_path) if runs_path.exists() else []
    gap_key = "last_gap" if args.metric == "last_gap" else "avg_gap"
    series: dict[tuple, dict[int, float]] = {}
    for r in summary:
        if args.policy and r["policy"] != args.policy:
            continue
        series.setdefault((r["policy"], r["alpha0"]), {})[r["T"]] = r["mean_gap"]
    fits = []
    for (policy, alpha0), pts in sorted(series.items()):
        Ts = sorted(pts)
        if len(Ts) < 3:
            continue
        per_seed = None
        sel = [r for r in runs if r["policy"] == policy and r["alpha0"] == alpha0]
        if sel:
            idx = sorted({r["seed_index"] for r in sel})
            table = {(r["seed_index"], r["T"]): r[gap_key] for r in sel}
            if all((k, T) in table for k in idx for T in Ts):
                per_seed = np.array([[table[(k, T)] for T in Ts] for k in idx])
        gaps = per_seed if per_seed is not None else np.array([pts[T] for T in Ts])
        fit = fit_rate(Ts, gaps, n_boot=args.bootstrap)
        fits.append({"policy": policy, "alpha0": alpha0, **fit.to_dict()})
    if not fits:
        raise ConfigError("no (policy, alpha0) series with at least 3 T values")
    print(json.dumps(fits, indent=2))
    return 0


def _cmd_simulate(args) -> int:
    from .simulator import export_trace, simulate

    cfg = load_config(args.config)
    base = Path(args.config).parent
    problem, _, _ = cfg.build_problem(base)
    out = Path(args.output) if args.output else output_root(cfg, base) / "simulate"
    out.mkdir(parents=True, exist_ok=True)
    T = max(cfg.T)
    kind, alpha0 = cfg.policies[0], cfg.alpha0[0]
    stats_all = []
    for k in range(cfg.seeds):
        seed = derive_seed(cfg.master_seed, k)
        d = out / f"seed{k}"
        d.mkdir(parents=True, exist_ok=True)
        res = simulate(cfg.workers_for(seed), problem, cfg.policy(kind, problem.dim, alpha0), T, seed,
                       event_log=d / "events.csv" if args.events else None)
        res.record.write(d)
        export_trace(res.stats, d / "trace.txt")
        stats = res.stats.to_dict()
        with open(d / "delay_stats.json", "w", encoding="utf-8") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
            fh.write("\n")
        stats_all.append({k2: stats[k2] for k2 in ("mean", "second_moment", "theta_hat", "steady_mean", "steady_mode")})
    print(json.dumps({"output": str(out), "seeds": stats_all}, indent=2))
    return 0


def _cmd_trace_export(args) -> int:
    rec = RunRecord.read(args.run_dir)
    print(write_trace(rec.tau, args.out))
    return 0


def _read_column(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip()]


def _cmd_auc(args) -> int:
    scores = [float(v) for v in _read_column(args.scores)]
    labels = [int(float(v)) for v in _read_column(args.labels)]
    if len(scores) != len(labels):
        raise ConfigError(f"{len(scores)} scores but {len(labels)} labels")
    try:
        value = compute_auc(scores, labels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(repr(value))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adadelay", description="Delay-adaptive asynchronous SGD experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("run", help="run an experiment described by a config file")
    s.add_argument("config")
    s.add_argument("--output", help="output directory (overrides the config)")
    s.set_defaults(func=_cmd_run)

    s = sub.add_parser("diagnose", help="residuals and bound checks for recorded runs")
    s.add_argument("run_dir")
    s.add_argument("--min-seeds", type=int, default=None)
    s.add_argument("--out", help="report path (default: <run_dir>/diagnostics.json)")
    s.set_defaults(func=_cmd_diagnose)

    s = sub.add_parser("ratefit", help="log-log slope of gap against T from a summary CSV")
    s.add_argument("summary")
    s.add_argument("--runs", help="per-run CSV for bootstrap intervals (default: runs.csv beside the summary)")
    s.add_argument("--policy")
    s.add_argument("--metric", choices=("avg_gap", "last_gap"), default="avg_gap")
    s.add_argument("--bootstrap", type=int, default=2000)
    s.set_defaults(func=_cmd_ratefit)

    s = sub.add_parser("simulate", help="run the worker/server simulator and export delay statistics")
    s.add_argument("config")
    s.add_argument("--output")
    s.add_argument("--events", action="store_true", help="write the event log CSV")
    s.set_defaults(func=_cmd_simulate)

    s = sub.add_parser("trace-export", help="write the delay column of a run record as a trace file")
    s.add_argument("run_dir")
    s.add_argument("out")
    s.set_defaults(func=_cmd_trace_export)

    s = sub.add_parser("auc", help="ROC AUC from a scores file and a labels file (one value per line)")
    s.add_argument("scores")
    s.add_argument("labels")
    s.set_defaults(func=_cmd_auc)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001 - the CLI reports any runtime failure as exit code 1
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
