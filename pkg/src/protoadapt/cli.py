"""Command line entry point: run, sweep, baseline, plot."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import expand_sweep, format_value, load_config
from .pipeline import run_experiment
from .report import emit_plots


def _load(args) -> dict:
    cfg = load_config(args.config) if args.config else {}
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.stages is not None:
        cfg["stages"] = [s for s in args.stages.split(",") if s]
    return cfg


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", type=Path, required=True)
    parser.add_argument("--stages", type=str, default=None,
                        help="comma list, e.g. stage1,distill1,distill2")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="protoadapt",
        description="prototype-guided self-training on synthetic shift benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, doc in (("run", "full experiment: warm-up plus configured stages"),
                      ("sweep", "expand sweep.* keys into one run per grid point"),
                      ("baseline", "warm-up only (the before-adaptation reference)")):
        p = sub.add_parser(name, help=doc)
        _add_common(p)

    plot = sub.add_parser("plot", help="re-render the SVG plots for a finished run")
    plot.add_argument("--out-dir", type=Path, required=True,
                      help="directory containing metrics.csv and target_features.csv")

    args = parser.parse_args(argv)

    if args.command == "plot":
        run_dir = args.out_dir
        proto = run_dir / "prototypes.csv"
        emit_plots(run_dir / "metrics.csv", run_dir / "target_features.csv",
                   run_dir, prototypes_csv=proto if proto.exists() else None)
        return 0

    cfg = _load(args)
    if args.command == "baseline":
        cfg["stages"] = []

    if args.command == "sweep":
        variants = expand_sweep(cfg)
        for i, variant in enumerate(variants):
            run_dir = args.out_dir / f"run_{i:03d}"
            manifest = run_experiment(variant, run_dir)
            swept = {k: variant[k] for k in variant
                     if any(k == s[len("sweep."):] for s in cfg if s.startswith("sweep."))}
            desc = " ".join(f"{k}={format_value(v)}" for k, v in sorted(swept.items()))
            print(f"{run_dir}: {desc} target_acc="
                  f"{manifest.stages[-1]['target_acc']:.4f}" if manifest.stages
                  else f"{run_dir}: failed")
        return 0

    manifest = run_experiment(cfg, args.out_dir)
    if manifest.failure_stage:
        print(f"aborted at {manifest.failure_stage}", file=sys.stderr)
        return 1
    for entry in manifest.stages:
        print(f"{entry['stage']}: target_acc={entry['target_acc']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
