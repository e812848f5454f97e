"""Command-line entry point: ``sfa-lab {train,sweep,merge,eval,fisher}``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import SWEEP_AXES, ExperimentConfig
from .errors import SfaLabError
from .experiment import (MERGE_MODES, evaluate_checkpoint, fisher_command, fmt, merge_command,
                         run_experiment, run_sweep)


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--out", help="output directory (overrides run.out and $SFA_LAB_OUT)")
    common.add_argument("--seed", type=int, help="run this single seed instead of run.seeds")
    common.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sfa-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("train", parents=[common], help="run one experiment per seed")

    p = sub.add_parser("sweep", parents=[common], help="vary one hyperparameter")
    p.add_argument("--axis", required=True, choices=sorted(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma separated values")

    p = sub.add_parser("merge", parents=[common], help="merge checkpoint files")
    p.add_argument("--mode", required=True, choices=MERGE_MODES)
    p.add_argument("inputs", nargs="+", help="input checkpoints (base first for task_arithmetic/ties)")
    p.add_argument("-o", "--output", required=True, help="merged checkpoint path")
    p.add_argument("--weights", type=_floats, help="comma separated weights")
    p.add_argument("--density", type=float, default=0.2, help="TIES trim density")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint on the config's tasks")
    p.add_argument("checkpoint")

    p = sub.add_parser("fisher", parents=[common], help="append a Fisher diagonal to a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--task", type=int, default=-1, help="task index whose training data is used")
    p.add_argument("--samples", type=int, help="number of examples (default: all)")
    return parser


def _config(args) -> ExperimentConfig:
    return ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_mapping({})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    seeds = [args.seed] if args.seed is not None else None
    try:
        if args.command == "train":
            print(run_experiment(_config(args), args.out, seeds, args.jobs))
        elif args.command == "sweep":
            values = [v.strip() for v in args.values.split(",") if v.strip()]
            print(run_sweep(_config(args), args.axis, values, args.out, seeds, args.jobs))
        elif args.command == "merge":
            print(merge_command(args.inputs, args.mode, args.output, args.weights, args.density))
        elif args.command == "eval":
            print("task,masked_accuracy,global_accuracy")
            for name, masked, glob in evaluate_checkpoint(args.checkpoint, _config(args)):
                print(f"{name},{fmt(masked)},{fmt(glob)}")
        elif args.command == "fisher":
            fisher = fisher_command(args.checkpoint, _config(args), args.task, args.samples,
                                    seed=args.seed or 0)
            print(f"{args.checkpoint}: appended Fisher diagonal, mean {fmt(fisher.mean())}")
    except (SfaLabError, OSError) as e:
        print(f"sfa-lab: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
