"""
Dataset command for the DeeR toolkit.
Generates expert demonstrations and their manifest.
"""

import argparse
import asyncio
import logging
from pathlib import Path

import storage
from config import RunConfig
from services.env.dataset import generate_dataset, write_dataset
from utils.validation import ValidationError, require, validate_splits

logger = logging.getLogger(__name__)


async def run(args: argparse.Namespace, config: RunConfig) -> int:
    """Generate ``--episodes`` demonstrations over ``--splits`` into ``--out``."""
    splits = require(validate_splits(args.splits))
    if args.episodes < 1:
        raise ValidationError("--episodes must be at least 1")
    out = Path(args.out)

    episodes, manifest = await asyncio.to_thread(generate_dataset, args.episodes, splits, config.seed, config.env)
    storage.ensure_written(await write_dataset(out, episodes, manifest), out)
    storage.ensure_written(await storage.save_resolved_config(out, config.to_dict()), out / storage.RESOLVED_CONFIG_FILE)
    logger.info(f"Dataset ready: {manifest.n_episodes} episodes, splits {''.join(manifest.splits)}, mean length {manifest.mean_len:.2f}")
    return 0


def setup(subparsers) -> None:
    """Register the gen-data command."""
    parser = subparsers.add_parser("gen-data", help="Generate expert demonstrations")
    parser.add_argument("--out", required=True, help="Output dataset directory")
    parser.add_argument("--episodes", type=int, default=2000, help="Number of episodes")
    parser.add_argument("--splits", default="ABCD", help="Environment split letters, e.g. ABC")
    parser.set_defaults(handler=run)
