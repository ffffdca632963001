"""
Report command for the DeeR toolkit.
"""

import argparse
import logging
from pathlib import Path

import storage
from config import RunConfig
from services.report import load_metrics, write_report

logger = logging.getLogger(__name__)


async def run(args: argparse.Namespace, config: RunConfig) -> int:
    runs = await load_metrics(args.runs)
    path = await write_report(runs, args.out)
    if path is None:
        return 1
    out = Path(args.out)
    storage.ensure_written(await storage.save_resolved_config(out, config.to_dict()), out / storage.RESOLVED_CONFIG_FILE)
    return 0


def setup(subparsers) -> None:
    """Register the report command."""
    parser = subparsers.add_parser("report", help="Merge evaluation runs into curve tables")
    parser.add_argument("runs", nargs="+", help="Eval output directories or metrics.json files")
    parser.add_argument("--out", required=True, help="Report directory")
    parser.set_defaults(handler=run)
