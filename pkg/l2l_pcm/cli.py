"""
Command-line interface for l2l-pcm.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from l2l_pcm.config import ExperimentConfig, parse_config
from l2l_pcm.crossbar.checks import run_crossbar_checks
from l2l_pcm.errors import (
    CapacityError,
    ConfigError,
    DatasetError,
    GenerationError,
    L2LError,
    NonFiniteError,
    PlacementError,
    SafetyLimitError,
    ScalingError,
    ShapeError,
    UsageError,
)
from l2l_pcm.experiment_manager import ExperimentManager
from l2l_pcm.utils.histograms import emit_weight_histograms

logger = logging.getLogger(__name__)

# Checked in order; subclasses come before their parents.
EXIT_CODES = (
    (ConfigError, 2),
    (DatasetError, 3),
    (UsageError, 4),
    (ShapeError, 4),
    (NonFiniteError, 5),
    (CapacityError, 6),
    (PlacementError, 6),
    (ScalingError, 6),
    (SafetyLimitError, 7),
    (GenerationError, 7),
    (L2LError, 1),
)

STAGES = {
    "maml-train": ("maml", ["train"]),
    "maml-eval": ("maml", ["evaluate"]),
    "eprop-train": ("eprop", ["train"]),
    "eprop-eval": ("eprop", ["evaluate"]),
}


def exit_code(error: L2LError) -> int:
    for kind, code in EXIT_CODES:
        if isinstance(error, kind):
            return code
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l2l-pcm",
        description="Learning-to-learn on simulated phase-change memory crossbars",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config", type=str, default=None, help="TOML experiment config"
    )
    common.add_argument(
        "--seed", type=int, default=None, help="Override the master seed"
    )
    common.add_argument(
        "--backend",
        type=str,
        choices=["software-32bit", "software-4bit", "crossbar"],
        default=None,
        help="Override the evaluation backend",
    )
    common.add_argument(
        "--out", type=str, default=None, help="Override the output directory"
    )
    common.add_argument(
        "--checkpoint", type=str, default=None, help="Checkpoint to resume or evaluate"
    )
    common.add_argument(
        "--log-level",
        type=str,
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Log level",
    )
    common.add_argument(
        "--full",
        action="store_true",
        default=False,
        help="Full-size networks and budgets",
    )

    commands = parser.add_subparsers(dest="command", required=True)
    for name, (kind, _) in STAGES.items():
        commands.add_parser(name, parents=[common], help=f"{kind} {name.split('-')[1]}")

    check = commands.add_parser(
        "crossbar-check", parents=[common], help="Crossbar numerics report"
    )
    check.add_argument(
        "--trials", type=int, default=1000, help="Random problems for the error bound"
    )
    check.add_argument(
        "--size", type=int, default=64, help="Rows and columns per problem"
    )

    traj = commands.add_parser(
        "traj-gen", parents=[common], help="Write target trajectories"
    )
    traj.add_argument("--count", type=int, default=4, help="Number of trajectories")

    hist = commands.add_parser(
        "hist", parents=[common], help="Weight histograms over checkpoints"
    )
    hist.add_argument("checkpoints", nargs="+", help="Checkpoint files in order")
    hist.add_argument("--select", type=str, default=None, help="Glob over tensor names")
    hist.add_argument("--bins", type=int, default=5, help="Number of bins")
    return parser


def load_config(
    args: argparse.Namespace, kind: Optional[str] = None
) -> ExperimentConfig:
    """Read ``--config`` (defaults when omitted) and apply the flag overrides."""
    config = parse_config(args.config) if args.config else ExperimentConfig()
    overrides = {
        "seed": args.seed,
        "backend": args.backend,
        "output_dir": args.out,
        "checkpoint": args.checkpoint,
        "kind": kind,
    }
    raw = config.model_dump()
    raw.update({key: value for key, value in overrides.items() if value is not None})
    if args.full:
        raw["full_budget"] = True
    try:
        return ExperimentConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(f"invalid override: {exc}")


def run(args: argparse.Namespace) -> int:
    if args.command in STAGES:
        kind, stages = STAGES[args.command]
        ExperimentManager(load_config(args, kind)).run(stages)
        return 0

    config = load_config(args)
    if args.command == "crossbar-check":
        report = run_crossbar_checks(
            config.analog, seed=config.seed, trials=args.trials, size=args.size
        )
        print(report.model_dump_json(indent=2))
        return 0 if report.passed else 1
    if args.command == "traj-gen":
        ExperimentManager(config).generate_trajectories(args.count)
        return 0
    if args.command == "hist":
        out = Path(config.output_dir) / "histograms.csv"
        emit_weight_histograms(args.checkpoints, args.select, args.bins, out)
        return 0
    raise UsageError(f"unknown command {args.command!r}")


def main(argv: Optional[List[str]] = None) -> int:
    """
    Entry point of the ``l2l-pcm`` command.

    Returns:
        status: 0 on success, a per-failure-class code otherwise
    """
    args = build_parser().parse_args(argv)
    logging.getLogger().setLevel(getattr(logging, args.log_level))
    try:
        return run(args)
    except L2LError as error:
        logger.error("%s", error)
        return exit_code(error)


if __name__ == "__main__":
    sys.exit(main())
