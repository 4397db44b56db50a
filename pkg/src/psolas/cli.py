"""Command-line front end: ``psolas {sort,fig1,ensemble,sweep}``.

Every command writes into ``--out`` only and always leaves a ``manifest.json``
holding the effective config (minus the output directory), seeds and package
version. Exit status 0 means
the run completed (even if the sort itself did not reach a defect-free
target); 2 means a configuration or I/O fault.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, parse_config
from .lattice import LatticeGeometry, SpinState, format_snapshot, sample_initial_filling, \
    sample_isolated_atoms
from .montecarlo import StatisticsError, run_ensemble, scaling_sweep, success_quantile, sweep_csv
from .register_ops import EventLog
from .rng import trial_rng, trial_seed_label
from .sorter import psolas_sort, sequential_sort_1d

FIG1_SEPARATIONS = (10, 5, 2, 1)


def _write(out: Path, name: str, text: str, written: list) -> None:
    (out / name).write_text(text)
    written.append(name)


def _manifest(cfg: RunConfig, extra: dict, written: list) -> str:
    body = {"mode": cfg.mode, "version": __version__, "config": cfg.to_text(exclude=("out",)),
            "master_seed": cfg.seed, "files": sorted(written)}
    body.update(extra)
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


def cmd_sort(cfg: RunConfig, workers: int = 1) -> int:
    scen = cfg.scenario_object()
    out = Path(cfg.out)
    written = []
    rng = trial_rng(cfg.seed, 0)
    state = sample_initial_filling(scen.geometry, scen.alpha, rng)
    state.log = EventLog()
    if cfg.export_snapshots:
        _write(out, "initial_state.txt", format_snapshot(state), written)
    report = psolas_sort(state, scen.target, scen.errors, scen.timing, rng,
                         max_iterations=scen.max_iterations, max_time=scen.max_time,
                         mode=scen.mode, isolation=scen.isolation)
    if cfg.export_snapshots:
        _write(out, "final_state.txt", format_snapshot(state), written)
    if cfg.export_event_log:
        _write(out, "events.jsonl", state.log.to_jsonl(), written)
    if cfg.export_plan:
        _write(out, "plan.jsonl", report.plan_jsonl(), written)
    _write(out, "report.json", json.dumps(report.summary(), sort_keys=True, indent=2) + "\n",
           written)
    extra = {"status": report.status, "trial_seeds": [trial_seed_label(cfg.seed, 0)],
             "scenario": scen.flat_params()}
    (out / "manifest.json").write_text(_manifest(cfg, extra, written))
    print(f"sort: {report.status} after {report.iterations} iterations, "
          f"t = {report.total_time:.4g} s, residual defects {report.residual_defects}")
    return 0


def cmd_fig1(cfg: RunConfig, workers: int = 1) -> int:
    errors, timing = cfg.fig1_models()
    geometry = LatticeGeometry((cfg.fig1_sites,))
    out = Path(cfg.out)
    written, statuses = [], {}
    buf = io.StringIO()
    table = csv.writer(buf, lineterminator="\n")
    table.writerow(["separation", "status", "iterations", "moves", "initial_sites",
                    "final_sites", "final_separations"])
    for i, sep in enumerate(FIG1_SEPARATIONS):
        rng = trial_rng(cfg.seed, i)
        state = sample_isolated_atoms(geometry, 4, 20, rng)
        initial = sorted(state.true_sites[state.alive, 0].tolist())
        targets = initial[0] + sep * np.arange(4)
        if cfg.export_snapshots:
            _write(out, f"fig1_d{sep}_before.txt", format_snapshot(state), written)
        report = sequential_sort_1d(state, targets, errors, timing, rng,
                                    max_passes=cfg.fig1_max_passes)
        if cfg.export_snapshots:
            _write(out, f"fig1_d{sep}_after.txt", format_snapshot(state), written)
        final = sorted(state.true_sites[state.in_register(SpinState.UP), 0].tolist())
        table.writerow([sep, report.status, report.iterations, report.op_counts["shift"],
                        " ".join(map(str, initial)), " ".join(map(str, final)),
                        " ".join(map(str, np.diff(final).tolist()))])
        statuses[str(sep)] = report.status
    _write(out, "fig1_summary.csv", buf.getvalue(), written)
    extra = {"status": statuses,
             "trial_seeds": [trial_seed_label(cfg.seed, i) for i in range(len(FIG1_SEPARATIONS))]}
    (out / "manifest.json").write_text(_manifest(cfg, extra, written))
    print("fig1: " + ", ".join(f"d={k}: {v}" for k, v in statuses.items()))
    return 0


def cmd_ensemble(cfg: RunConfig, workers: int = 1) -> int:
    scen = cfg.scenario_object()
    out = Path(cfg.out)
    written = []
    result = run_ensemble(scen, cfg.trials, cfg.seed, parallelism_hint=workers)
    _write(out, "success_curve.csv", result.success_curve_csv(), written)
    _write(out, "defect_trace.csv", result.defect_trace_csv(), written)
    _write(out, "trials.csv", result.trials_csv(), written)
    try:
        q95 = success_quantile(result, 0.95)
    except StatisticsError:
        q95 = None
    statuses = {}
    for r in result.reports:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    extra = {"status": dict(sorted(statuses.items())), "success_fraction": result.success_fraction(),
             "quantile_95_s": q95, "trial_seeds": result.seeds, "scenario": scen.flat_params()}
    (out / "manifest.json").write_text(_manifest(cfg, extra, written))
    print(f"ensemble: {result.n_trials} trials, success {result.success_fraction():.3f}, "
          f"95% quantile {q95} s")
    return 0


def cmd_sweep(cfg: RunConfig, workers: int = 1) -> int:
    out = Path(cfg.out)
    written = []
    alphas = [float(a) for a in cfg.sweep_alphas.split(",")]
    sizes = [int(n) for n in cfg.sweep_sizes.split(",")]
    grid = int(cfg.overrides.get("grid_size", 100))
    rows = scaling_sweep(alphas, sizes, cfg.trials, cfg.seed, grid_size=grid,
                         parallelism_hint=workers)
    _write(out, "sweep.csv", sweep_csv(rows), written)
    (out / "manifest.json").write_text(_manifest(cfg, {"status": "complete"}, written))
    for r in rows:
        print(f"alpha={r.alpha} N={r.n_sites}: mean iterations {r.mean_iterations:.2f} "
              f"(bound {r.bound})")
    return 0


COMMANDS = {"sort": cmd_sort, "fig1": cmd_fig1, "ensemble": cmd_ensemble, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psolas", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=sorted(COMMANDS),
                   help="run mode (defaults to the config's 'mode' key)")
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--trials", type=int, metavar="N")
    p.add_argument("--out", metavar="DIR")
    p.add_argument("--scenario", choices=["A", "B", "custom"])
    p.add_argument("--error-free", action="store_true", help="switch off every error channel")
    p.add_argument("--workers", type=int, default=1,
                   help="worker processes for ensembles; results do not depend on it")
    return p


def load_config(args) -> RunConfig:
    text = Path(args.config).read_text() if args.config else ""
    cfg = parse_config(text)
    updates = {}
    if args.command:
        updates["mode"] = args.command
    for key in ("seed", "trials", "out", "scenario"):
        if getattr(args, key) is not None:
            updates[key] = getattr(args, key)
    if args.error_free:
        updates["error_free"] = True
    return cfg.with_updates(**updates)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        return COMMANDS[cfg.mode](cfg, workers=max(1, args.workers))
    except ConfigError as exc:
        print(f"psolas: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"psolas: I/O error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
