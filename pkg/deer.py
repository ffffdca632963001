"""
DeeR toolkit - Main Entry Point

Dynamic early-exit policies for language-conditioned tabletop manipulation:
demonstration generation, multi-exit training, budget calibration, chain
evaluation and reporting.

Usage:
    python deer.py [--config FILE] [--set key=value ...] [--seed N] <command> ...
"""

import argparse
import asyncio
import logging
import sys
from typing import List, Optional

from cmds import calibrate, data, evaluate, report, train
from storage import StorageError
from config import RunConfig, set_config
from services.budget.allocation import InfeasibleBudgetError
from utils.tensor import NumericError
from utils.validation import ValidationError, parse_overrides

# Setup logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    handlers=[
        logging.StreamHandler(sys.stdout)
    ]
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INFEASIBLE = 2
EXIT_NUMERIC = 3

COMMANDS = (data, train, calibrate, evaluate, report)


class UsageParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog="deer", description="Dynamic early-exit toolkit")
    parser.add_argument("--config", default=None, help="KEY=value configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="Override one configuration key")
    parser.add_argument("--seed", type=int, default=None, help="Master seed")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=UsageParser)
    for module in COMMANDS:
        module.setup(subparsers)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < config file < --set < --seed < DEER_SEED."""
    config = RunConfig.from_file(args.config, parse_overrides(args.set))
    if args.seed is not None:
        config.seed = args.seed
    config.apply_env_seed()
    set_config(config)
    return config


async def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and map failures to exit codes."""
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        config = resolve_config(args)
        return await args.handler(args, config)
    except ValidationError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_USAGE
    except InfeasibleBudgetError as e:
        logger.error(f"Infeasible budget: {e}")
        return EXIT_INFEASIBLE
    except NumericError as e:
        logger.error(f"Numeric failure: {e}")
        return EXIT_NUMERIC
    except StorageError as e:
        logger.error(f"Output not saved: {e}")
        return EXIT_NUMERIC
    except Exception as e:
        logger.error(f"Command '{args.command}' failed: {e}", exc_info=True)
        return EXIT_NUMERIC


if __name__ == "__main__":
    try:
        sys.exit(asyncio.run(main()))
    except KeyboardInterrupt:
        logger.info("Process interrupted")
        sys.exit(130)
