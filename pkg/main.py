"""
LocPol Lab: In-Context Nonparametric Regression with Linear-Attention Transformers

Command-line entry point that routes each subcommand to its runner in command_modules
and maps failures to exit codes.
"""

import argparse
import logging
import sys
from typing import List, Dict, Optional, Any

from app_config import configure_logging, load_experiment_config
from cli_components import EXIT_CONFIG_ERROR, EXIT_INFEASIBLE, render_status
from command_modules.compare_command import run_compare_command
from command_modules.construct_command import ConstructCommand
from command_modules.covering_command import run_covering_command
from command_modules.rates_command import RatesCommand
from command_modules.simulate_command import run_simulate_command
from command_modules.train_command import TrainCommand
from modules.errors import (ConfigError, InfeasibleConstructionError, LocPolLabError, OverwriteRefusedError,
                            TrainingDivergenceError)

logger = logging.getLogger(__name__)

EXIT_FAILURE = 1


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"Expected comma-separated integers, got {text!r}") from e


# Build the parser with shared flags on every subcommand
def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key = value experiment file")
    shared.add_argument("--seed", type=int, help="master seed")
    shared.add_argument("--out-dir", dest="out_dir", help="directory for result files")
    shared.add_argument("--n-grid", dest="n_grid", type=_int_list, help="comma-separated prompt lengths")
    shared.add_argument("--tasks", type=int, help="Monte Carlo tasks per grid point")
    shared.add_argument("--format", dest="output_format", choices=("csv", "json"), help="result table format")
    shared.add_argument("--workers", type=int, help="worker processes for grid experiments")
    shared.add_argument("--check", action="store_true", help="enforce acceptance thresholds")
    shared.add_argument("--overwrite", action="store_true", default=None, help="replace existing outputs")
    shared.add_argument("--log-level", dest="log_level", default=None, help="logging level")

    parser = argparse.ArgumentParser(prog="locpol-lab",
                                     description="In-context local polynomial regression with linear-attention transformers")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[shared], help="write pretraining sets as JSON Lines")
    sub.add_parser("construct", parents=[shared], help="build and save the explicit transformer")
    sub.add_parser("compare", parents=[shared], help="compare the constructed transformer with the estimator")
    train = sub.add_parser("train", parents=[shared], help="empirical risk minimization over the class")
    train.add_argument("--cold-start", dest="warm_start", action="store_false", default=None,
                       help="initialize near zero instead of from the construction")
    train.add_argument("--epochs", type=int)
    train.add_argument("--gamma", type=int, help="pretraining set size")
    rates = sub.add_parser("rates", parents=[shared], help="excess risk across the n grid")
    rates.add_argument("--include-tf", dest="include_tf", action="store_true",
                       help="also evaluate the constructed transformer")
    sub.add_parser("covering-bound", parents=[shared], help="tabulate covering and ERM tail bounds")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    names = ("seed", "out_dir", "n_grid", "tasks", "output_format", "workers", "overwrite",
             "warm_start", "epochs", "gamma")
    return {name: getattr(args, name, None) for name in names}


def dispatch(args: argparse.Namespace) -> int:
    cfg = load_experiment_config(args.config, _overrides(args), kind=args.command)
    if args.command == "simulate":
        return run_simulate_command(cfg)
    if args.command == "construct":
        return ConstructCommand(cfg).run()
    if args.command == "compare":
        return run_compare_command(cfg, check=args.check)
    if args.command == "train":
        return TrainCommand(cfg).run()
    if args.command == "rates":
        return RatesCommand(cfg, check=args.check, include_tf=args.include_tf).run()
    return run_covering_command(cfg)


# Entry point with exit-code mapping
def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run the subcommand and translate failures.

    Returns:
        int: 0 on success, 2 for configuration or overwrite errors, 3 for an infeasible
        construction, 4 when --check thresholds fail, 1 otherwise
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return dispatch(args)
    except (ConfigError, OverwriteRefusedError) as e:
        render_status(str(e), "error")
        return EXIT_CONFIG_ERROR
    except InfeasibleConstructionError as e:
        render_status(f"Infeasible construction: {e}", "error")
        return EXIT_INFEASIBLE
    except TrainingDivergenceError as e:
        render_status(f"Training diverged after {len(e.loss_history) - 1} epochs: {e}", "error")
        return EXIT_FAILURE
    except (LocPolLabError, ValueError) as e:
        logger.error(f"❌ {e}")
        render_status(str(e), "error")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
