"""Command-line experiment runner.

Usage::

    bayeshdsa <subcommand> --config PATH [--out DIR] [--seed INT]

Exit status: 0 success, 2 configuration error, 3 solver failure,
4 verification failure.  The failing stage is named on stderr.
"""

import argparse
import sys

from .config import load_config
from .exceptions import (
    BreakdownError,
    ConfigError,
    ForwardSolveFailure,
    MaxIterExceeded,
    NonPositiveCurvature,
    NotAtStationaryPoint,
)
from .workflow import ExperimentRunner, StageFailure

SUBCOMMANDS = ("map", "lis", "hdsa", "sample", "variance", "verify-theorem1", "example1", "all")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_VERIFY = 4


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bayeshdsa",
        description="MAP estimation, likelihood-informed subspaces, hyper-differential "
                    "sensitivities and Laplace posteriors for Bayesian inverse problems.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", required=True, help="INI experiment configuration")
    parser.add_argument("--out", default=None, help="artifact directory (overrides [output] dir)")
    parser.add_argument("--seed", type=int, default=None, help="overrides [run] seed")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    stage = args.subcommand
    try:
        cfg = load_config(args.config, seed=args.seed)
        runner = ExperimentRunner(cfg, args.out)
        runner.run(stage)
    except ConfigError as exc:
        print(f"bayeshdsa {stage}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageFailure as exc:
        print(f"bayeshdsa {stage}: stage {exc.stage} failed: {exc}", file=sys.stderr)
        return exc.code
    except (ForwardSolveFailure, MaxIterExceeded, NonPositiveCurvature, BreakdownError,
            NotAtStationaryPoint) as exc:
        print(f"bayeshdsa {stage}: solver failure ({type(exc).__name__}): {exc}",
              file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
