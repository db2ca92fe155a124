"""Command-line entry point.

One subcommand per pipeline stage plus ``run-all``. Exit codes: 0 on
success, 2 on validation/configuration errors, 3 on numerical failures
(non-finite losses or gradients).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .config import PipelineConfig, apply_override, config_to_dict, load_config
from .nncore import GradientError, ShapeError
from .pipeline import RUN_ALL_ORDER, STAGES, RunDir, ValidationError, run_all, stage_evaluate


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--out", required=True, help="run directory for artifacts")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None, help="override the global seed")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="stage.key=value",
        help="override a single config value (repeatable)",
    )
    p.add_argument("--force", action="store_true", help="ignore config-hash mismatches")
    p.add_argument("--threads", type=int, default=1, help="torch thread count (1 = deterministic)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lungpipe",
        description="Multi-stage lung-cancer detection pipeline on volumetric scans.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in RUN_ALL_ORDER:
        p = sub.add_parser(name, help=f"run the {name} stage")
        _add_common(p)
        if name == "evaluate":
            p.add_argument(
                "--predictions",
                default=None,
                help="score an external predictions CSV instead of the run's own",
            )
    p = sub.add_parser("run-all", help="run every stage in order")
    _add_common(p)
    return parser


def _build_run(args) -> RunDir:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    for assignment in args.overrides:
        apply_override(cfg, assignment)
    return RunDir(args.out, cfg, force=args.force)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        run = _build_run(args)
        if args.command == "run-all":
            run_all(run)
        elif args.command == "evaluate":
            pred = Path(args.predictions) if args.predictions else None
            report = stage_evaluate(run, predictions=pred)
            for key in sorted(report):
                print(f"{key}: {report[key]}")
        else:
            STAGES[args.command](run)
    except (ValidationError, ShapeError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GradientError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
