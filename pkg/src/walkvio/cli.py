"""Command-line entry points: simulate, estimate, evaluate, compare.

Output files (all under ``--output``):

* simulate: ``dataset.txt``, ``gait.cfg``
* estimate: ``estimate.txt`` (EST records), ``rounds.csv``
* evaluate: ``report.txt``, ``errors.csv``, ``boxplot.csv``
* compare: ``cells.csv``, ``summary.csv``, ``summary.txt``
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import kvconfig
from .dataset import DatasetFormatError, Trajectory, read_dataset, read_trajectory, write_dataset, write_trajectory
from .estimator import MODES, EstimatorOutput, WindowConfig, run_estimator
from .evaluation import ALIGNMENTS, EvaluationError, trajectory_error
from .simulator import PATHS, PRESETS, GaitConfig, preset_config, simulate

log = logging.getLogger(__name__)

MODE_LABELS = {"vio": "VIO", "vio-leg-fixed": "fixed-factor", "walk-vio": "WALK-VIO"}


class CliError(RuntimeError):
    pass


# -- configuration ---------------------------------------------------------------------


def _read_kv(path) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    return kvconfig.parse_kv(text, str(path))


def gait_config(path=None, preset=None, route=None, seed=None, **overrides) -> GaitConfig:
    """Preset values, then config-file keys, then explicit flags."""
    kv = _read_kv(path)
    parsed = kvconfig.from_kv(GaitConfig, kv)
    explicit = {k: getattr(parsed, k) for k in kv}
    preset = preset or explicit.pop("preset", "smooth")
    route = route or explicit.pop("path", "circle")
    seed = seed if seed is not None else explicit.pop("seed", 0)
    for k in ("preset", "path", "seed"):
        explicit.pop(k, None)
    explicit.update(overrides)
    return preset_config(preset, route, seed, **explicit)


def window_config(path=None, mode=None, **overrides) -> WindowConfig:
    kv = _read_kv(path)
    if mode is not None:
        overrides["mode"] = mode
    return kvconfig.from_kv(WindowConfig, kv, **overrides).validate()


def parse_seeds(text: str) -> list[int]:
    """``"N"`` or inclusive ``"N..M"``."""
    lo, sep, hi = text.partition("..")
    try:
        a = int(lo)
        b = int(hi) if sep else a
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or N..M, got {text!r}") from None
    if b < a:
        raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
    return list(range(a, b + 1))


# -- artifacts -------------------------------------------------------------------------


def estimate_trajectory(out: EstimatorOutput, meta: dict | None = None) -> Trajectory:
    rows = np.column_stack([out.timestamps, out.positions, out.quaternions, out.velocities]) if len(out) else np.zeros((0, 11))
    return Trajectory(rows, dict(meta or {}))


def rounds_csv(out: EstimatorOutput) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["frame_id", "t", "window", "lambda_x_raw", "lambda_y_raw", "gamma_x", "gamma_y", "initial_cost", "final_cost", "iterations", "reason", "slide"]
    )
    for r in out.rounds:
        w.writerow(
            [
                r.frame_id,
                repr(r.timestamp),
                r.window_size,
                repr(float(r.raw_eigenvalues[0])),
                repr(float(r.raw_eigenvalues[1])),
                repr(float(r.gamma_eigenvalues[1])),
                repr(float(r.gamma_eigenvalues[2])),
                repr(r.initial_cost),
                repr(r.final_cost),
                r.iterations,
                r.reason,
                r.slide,
            ]
        )
    return buf.getvalue()


def check_estimate(out: EstimatorOutput) -> None:
    if out.failed_rounds:
        raise CliError(f"estimator failed to converge in {out.failed_rounds} round(s)")
    if not np.all(np.isfinite(out.positions)):
        raise CliError("estimator produced non-finite states")


# -- comparison ------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class CompareCell:
    path: str
    preset: str
    seed: int
    mode: str
    rmse: float
    max_error: float
    frames: int
    failed_rounds: int


def run_cell(path: str, preset: str, seed: int, gait_overrides=None, window_overrides=None, align: str = "se3") -> list:
    """Simulate one dataset and run every estimator mode on it."""
    sim = simulate(preset_config(preset, path, seed, **(gait_overrides or {})))
    gt = sim.dataset.gt
    cells = []
    for mode in MODES:
        out = run_estimator(sim.dataset, WindowConfig(mode=mode, **(window_overrides or {})))
        rep = trajectory_error(out.timestamps, out.positions, gt[:, 0], gt[:, 1:4], align=align)
        cells.append(CompareCell(path, preset, seed, mode, rep.rmse, rep.max_error, len(out), out.failed_rounds))
    return cells


def compare_modes(paths, presets, seeds, gait_overrides=None, window_overrides=None, align="se3", jobs: int = 1) -> list:
    tasks = [(p, s, seed) for p in paths for s in presets for seed in seeds]
    args = [(p, s, seed, gait_overrides, window_overrides, align) for p, s, seed in tasks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, *zip(*args)))
    else:
        results = []
        for a in args:
            log.info("compare: %s %s seed %d", *a[:3])
            results.append(run_cell(*a))
    return [c for cell in results for c in cell]


@dataclasses.dataclass(frozen=True)
class SummaryRow:
    path: str
    preset: str
    median_rmse: dict  # mode -> median translation RMSE over seeds
    median_max: dict
    seeds: int

    @property
    def improvement(self) -> float:
        """Relative median-RMSE reduction of WALK-VIO over VIO-only."""
        base = self.median_rmse["vio"]
        return (base - self.median_rmse["walk-vio"]) / base if base > 0 else 0.0


def summarize(cells) -> list:
    rows = []
    keys = sorted({(c.path, c.preset) for c in cells}, key=lambda k: (PATHS.index(k[0]), list(PRESETS).index(k[1])))
    for path, preset in keys:
        sel = [c for c in cells if c.path == path and c.preset == preset]
        rmse = {m: float(np.median([c.rmse for c in sel if c.mode == m])) for m in MODES}
        mx = {m: float(np.median([c.max_error for c in sel if c.mode == m])) for m in MODES}
        rows.append(SummaryRow(path, preset, rmse, mx, len({c.seed for c in sel})))
    return rows


def cells_csv(cells) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "preset", "seed", "mode", "rmse", "max_error", "frames", "failed_rounds"])
    for c in cells:
        w.writerow([c.path, c.preset, c.seed, c.mode, repr(c.rmse), repr(c.max_error), c.frames, c.failed_rounds])
    return buf.getvalue()


def summary_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "preset", "seeds"] + [f"{m}_rmse" for m in MODES] + [f"{m}_max" for m in MODES] + ["improvement"])
    for r in rows:
        w.writerow(
            [r.path, r.preset, r.seeds]
            + [repr(r.median_rmse[m]) for m in MODES]
            + [repr(r.median_max[m]) for m in MODES]
            + [repr(r.improvement)]
        )
    return buf.getvalue()


def summary_table(rows) -> str:
    """Median translation RMSE (max) in metres, one row per path and preset."""
    head = f"{'path':<8} {'preset':<10}" + "".join(f" {MODE_LABELS[m]:>20}" for m in MODES) + f" {'gain':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        cols = "".join(f" {r.median_rmse[m]:>9.4f} ({r.median_max[m]:.4f})" for m in MODES)
        lines.append(f"{r.path:<8} {r.preset:<10}{cols} {100 * r.improvement:>6.1f}%")
    return "\n".join(lines) + "\n"


# -- subcommands -----------------------------------------------------------------------


def _output_dir(args) -> Path:
    out = Path(args.output)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _load_dataset(path):
    if path is None:
        raise CliError("--dataset is required")
    try:
        return read_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset {path}: {exc.strerror}") from None


def cmd_simulate(args) -> None:
    cfg = gait_config(args.config, args.preset, args.path, args.seed)
    out = _output_dir(args)
    sim = simulate(cfg)
    write_dataset(sim.dataset, out / "dataset.txt")
    (out / "gait.cfg").write_text(kvconfig.dump(cfg))
    print(f"wrote {out / 'dataset.txt'} ({sim.dataset.record_count} records)")


def cmd_estimate(args) -> None:
    cfg = window_config(args.config, args.mode)
    ds = _load_dataset(args.dataset)
    out = run_estimator(ds, cfg)
    check_estimate(out)
    dest = _output_dir(args)
    meta = {"mode": cfg.mode, "dataset": Path(args.dataset).name, "frames": len(out)}
    write_trajectory(estimate_trajectory(out, meta), dest / "estimate.txt")
    (dest / "rounds.csv").write_text(rounds_csv(out))
    print(f"wrote {dest / 'estimate.txt'} ({len(out)} poses, mode {cfg.mode})")


def cmd_evaluate(args) -> None:
    ds = _load_dataset(args.dataset)
    dest = Path(args.output)
    est_path = Path(args.estimate) if args.estimate else dest / "estimate.txt"
    try:
        est = read_trajectory(est_path)
    except OSError as exc:
        raise CliError(f"cannot read estimate {est_path}: {exc.strerror}") from None
    rep = trajectory_error(est.t, est.positions, ds.gt[:, 0], ds.gt[:, 1:4], align=args.align)
    dest = _output_dir(args)
    (dest / "report.txt").write_text(rep.to_text())
    (dest / "errors.csv").write_text(rep.series_csv())
    (dest / "boxplot.csv").write_text(rep.boxplot_csv())
    print(f"rmse = {rep.rmse:.6f} m, max = {rep.max_error:.6f} m over {len(rep)} samples")


def cmd_compare(args) -> None:
    gait_kv = _read_kv(args.config)
    gait_over = {k: getattr(kvconfig.from_kv(GaitConfig, gait_kv), k) for k in gait_kv if k not in ("path", "preset", "seed")}
    est_kv = _read_kv(args.estimator_config)
    win_over = {k: getattr(kvconfig.from_kv(WindowConfig, est_kv), k) for k in est_kv if k != "mode"}
    paths = [args.path] if args.path else list(PATHS)
    presets = [args.preset] if args.preset else list(PRESETS)
    seeds = args.seeds or ([args.seed] if args.seed is not None else [0])
    cells = compare_modes(paths, presets, seeds, gait_over, win_over, args.align, args.jobs)
    failed = sum(c.failed_rounds for c in cells)
    if failed:
        raise CliError(f"estimator failed to converge in {failed} round(s)")
    rows = summarize(cells)
    dest = _output_dir(args)
    (dest / "cells.csv").write_text(cells_csv(cells))
    (dest / "summary.csv").write_text(summary_csv(rows))
    table = summary_table(rows)
    (dest / "summary.txt").write_text(table)
    print(table, end="")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="walkvio", description="Legged visual-inertial odometry: simulate, estimate, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_help):
        sp.add_argument("--config", metavar="PATH", help=config_help)
        sp.add_argument("--output", metavar="DIR", default=".", help="directory for written artifacts")

    sp = sub.add_parser("simulate", help="write a synthetic dataset")
    common(sp, "gait config (key = value, GaitConfig fields)")
    sp.add_argument("--preset", choices=list(PRESETS))
    sp.add_argument("--path", choices=PATHS)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("estimate", help="run one estimator mode over a dataset")
    common(sp, "estimator config (key = value, WindowConfig fields)")
    sp.add_argument("--dataset", metavar="PATH", required=True)
    sp.add_argument("--mode", choices=MODES)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("evaluate", help="translation error of an estimate against the dataset ground truth")
    common(sp, "unused; accepted for symmetry")
    sp.add_argument("--dataset", metavar="PATH", required=True)
    sp.add_argument("--estimate", metavar="PATH", help="EST file (default: OUTPUT/estimate.txt)")
    sp.add_argument("--align", choices=ALIGNMENTS[:2], default="se3")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("compare", help="all modes over paths x presets x seeds, Table-I-shaped summary")
    common(sp, "gait config overrides applied to every simulated dataset")
    sp.add_argument("--estimator-config", metavar="PATH", help="estimator config overrides (mode is ignored)")
    sp.add_argument("--preset", choices=list(PRESETS), help="restrict to one preset (default: all)")
    sp.add_argument("--path", choices=PATHS, help="restrict to one path (default: all)")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--seeds", type=parse_seeds, metavar="N..M")
    sp.add_argument("--align", choices=ALIGNMENTS[:2], default="se3")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, kvconfig.ConfigError, DatasetFormatError, EvaluationError, ValueError) as exc:
        print(f"walkvio {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
