"""Command-line entry point: pretrain, sweep, analyze, probe, export, gen-data.

Every command reads one JSON settings document (``--config``) and applies
``--set key=value`` overrides on top, e.g. ``--set train.steps=500``.
Exit codes: 0 success, 2 argument or configuration error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import torch

from . import analysis, trainer
from .config import JobSettings, apply_overrides, build_settings, load_settings
from .errors import ConfigurationError
from .objective import LossWeights
from .patch_mask import RANDOM_BOTH, SELECTIVE
from .synthdata import generate_scene, write_scene

logger = logging.getLogger("sgmim")

FAILED_MARKER = ".failed"


@dataclass(frozen=True)
class SweepCell:
    axis: str
    name: str
    strategy: str
    ratio: float
    weights: LossWeights


MASKING_CELLS = (
    SweepCell("masking", "random_0.6", RANDOM_BOTH, 0.6, LossWeights(1.0, 1.0)),
    SweepCell("masking", "selective_0.5", SELECTIVE, 0.5, LossWeights(1.0, 1.0)),
    SweepCell("masking", "selective_0.6", SELECTIVE, 0.6, LossWeights(1.0, 1.0)),
    SweepCell("masking", "selective_0.7", SELECTIVE, 0.7, LossWeights(1.0, 1.0)),
)
LOSS_WEIGHT_CELLS = tuple(
    SweepCell("loss_weights", f"lambda_{w.label}", SELECTIVE, 0.6, w)
    for w in (LossWeights(1.0, 1.0), LossWeights(1.0, 0.1), LossWeights(1.0, 0.01), LossWeights(1.0, 0.0))
)
AXES = {"masking": MASKING_CELLS, "loss_weights": LOSS_WEIGHT_CELLS, "all": MASKING_CELLS + LOSS_WEIGHT_CELLS}

SWEEP_COLUMNS = [
    "axis", "cell", "masking_strategy", "mask_ratio", "lambda_I", "lambda_S", "seeds",
    "final_L_total", "probe_rmse", "probe_delta1", "probe_rmse_mean", "probe_delta1_mean",
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON settings file (train/model/scene/probe sections)")
    common.add_argument("--output-dir", default=".", help="directory for all outputs (default: .)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a settings value, e.g. train.steps=500 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="sgmim", description="Structure-guided masked image modeling at desk scale.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("pretrain", parents=[common], help="pre-train; writes checkpoint.sgm and train_log.csv")

    sw = sub.add_parser("sweep", parents=[common], help="run the masking / loss-weight ablation grid")
    sw.add_argument("--axis", choices=sorted(AXES), default="all", help="which grid to run (default: all)")
    sw.add_argument("--cells", help="comma-separated subset of cell names to run (default: all on the axis)")
    sw.add_argument("--workers", type=int, default=1, help="parallel worker processes (default: 1)")

    an = sub.add_parser("analyze", parents=[common], help="Fourier profile of encoder features")
    an.add_argument("--checkpoint", required=True, help="full or encoder-only checkpoint")
    an.add_argument("--pgm", action="store_true", help="also dump a feature-energy PGM of the first sample")

    pr = sub.add_parser("probe", parents=[common], help="linear depth probe on a frozen encoder")
    pr.add_argument("--checkpoint", required=True, help="full or encoder-only checkpoint")

    ex = sub.add_parser("export", parents=[common], help="write encoder.sgm from a full checkpoint")
    ex.add_argument("--checkpoint", required=True, help="full training checkpoint")

    gd = sub.add_parser("gen-data", parents=[common], help="write scenes as flat binary files")
    gd.add_argument("--start-seed", type=int, default=0, help="first scene seed (default: 0)")
    gd.add_argument("--count", type=int, default=16, help="number of scenes (default: 16)")
    return p


# ---------------------------------------------------------------- commands


def cmd_pretrain(args, s: JobSettings, out: Path) -> None:
    trainer.pretrain(s.train, s.model, s.scene, out)


def cell_settings(s: JobSettings, cell: SweepCell, seed: int) -> JobSettings:
    train = dataclasses.replace(
        s.train, seed=seed, masking_strategy=cell.strategy, mask_ratio=cell.ratio, loss_weights=cell.weights
    )
    return dataclasses.replace(s, train=train)


def run_cell(s: JobSettings, out: Path, threads: int | None = None) -> tuple[float, float, float]:
    """Pre-train, export and probe one configuration; returns (final L_total, rmse, delta1)."""
    if threads:
        torch.set_num_threads(threads)
    out.mkdir(parents=True, exist_ok=True)
    try:
        state = trainer.pretrain(s.train, s.model, s.scene, out)
        trainer.export_encoder(out / "checkpoint.sgm", out / "encoder.sgm")
        m = analysis.probe_depth(out / "encoder.sgm", s.scene, s.probe)
        analysis.write_metrics_csv(out / "probe.csv", {"rmse": m.rmse, "delta1": m.delta1})
    except Exception:
        (out / FAILED_MARKER).write_text(traceback.format_exc())
        raise
    return state.history[-1].L_total, m.rmse, m.delta1


def _fmt(xs) -> str:
    return ";".join(repr(float(x)) for x in xs)


def cmd_sweep(args, s: JobSettings, out: Path) -> None:
    cells = AXES[args.axis]
    if args.cells:
        wanted = [c.strip() for c in args.cells.split(",") if c.strip()]
        unknown = set(wanted) - {c.name for c in cells}
        if unknown:
            raise ConfigurationError(f"unknown cell(s) {sorted(unknown)} on axis {args.axis}")
        cells = tuple(c for c in cells if c.name in wanted)
    # identical configurations (e.g. selective 0.6 with 1/1 on both axes) are trained once
    jobs: dict[tuple, JobSettings] = {}
    for cell in cells:
        for seed in s.sweep_seeds:
            cs = cell_settings(s, cell, seed)
            jobs.setdefault((cell.strategy, cell.ratio, cell.weights.label, seed), cs)
    dirs = {k: out / f"{k[0]}_{k[1]}_{k[2].replace('/', '-')}" / f"seed_{k[3]}" for k in jobs}
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            futures = {k: pool.submit(run_cell, jobs[k], dirs[k], 1) for k in jobs}
            results = {k: f.result() for k, f in futures.items()}
    else:
        results = {k: run_cell(jobs[k], dirs[k]) for k in jobs}

    with open(out / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SWEEP_COLUMNS)
        for cell in cells:
            rs = [results[(cell.strategy, cell.ratio, cell.weights.label, seed)] for seed in s.sweep_seeds]
            loss, rm, d1 = zip(*rs)
            w.writerow([
                cell.axis, cell.name, cell.strategy, repr(cell.ratio), repr(cell.weights.lambda_I),
                repr(cell.weights.lambda_S), ";".join(str(x) for x in s.sweep_seeds), _fmt(loss), _fmt(rm),
                _fmt(d1), repr(sum(rm) / len(rm)), repr(sum(d1) / len(d1)),
            ])


def cmd_analyze(args, s: JobSettings, out: Path) -> None:
    enc = analysis.load_encoder(args.checkpoint)
    lo = s.probe.val_seeds[0]
    seeds = range(lo, lo + s.analysis_samples)
    feats, _ = analysis.encode_scenes(enc, seeds, s.scene, s.analysis_layer)
    grids = analysis.tokens_to_grid(feats, enc.encoder.cfg.grid)
    profile = analysis.log_amplitude_profile(grids)
    analysis.write_profile_csv(out / "spectrum.csv", profile)
    analysis.write_metrics_csv(out / "analysis.csv", {"delta_log_amplitude": analysis.delta_log_amplitude(profile)})
    if args.pgm:
        analysis.write_energy_pgm(out / "feature_energy.pgm", grids[0])


def cmd_probe(args, s: JobSettings, out: Path) -> None:
    m = analysis.probe_depth(args.checkpoint, s.scene, s.probe)
    analysis.write_metrics_csv(out / "probe.csv", {"rmse": m.rmse, "delta1": m.delta1})


def cmd_export(args, s: JobSettings, out: Path) -> None:
    trainer.export_encoder(args.checkpoint, out / "encoder.sgm")


def cmd_gen_data(args, s: JobSettings, out: Path) -> None:
    if args.count < 0:
        raise ConfigurationError("--count must be >= 0")
    for seed in range(args.start_seed, args.start_seed + args.count):
        write_scene(out / f"scene_{seed:08d}.bin", generate_scene(seed, s.scene))


COMMANDS = {
    "pretrain": cmd_pretrain,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
    "probe": cmd_probe,
    "export": cmd_export,
    "gen-data": cmd_gen_data,
}


def run(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)

    try:
        settings = build_settings(apply_overrides(load_settings(args.config), args.overrides))
        if getattr(args, "workers", 1) < 1:
            raise ConfigurationError("--workers must be >= 1")
    except (ConfigurationError, TypeError, ValueError) as e:
        print(f"sgmim {args.command}: configuration error: {e}", file=sys.stderr)
        return 2

    out = Path(args.output_dir)
    marker = out / FAILED_MARKER
    try:
        out.mkdir(parents=True, exist_ok=True)
        if marker.exists():
            marker.unlink()
        COMMANDS[args.command](args, settings, out)
    except ConfigurationError as e:
        print(f"sgmim {args.command}: configuration error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"sgmim {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        try:
            marker.write_text(traceback.format_exc())
        except OSError:
            pass
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
