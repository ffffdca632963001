"""
Training command for the DeeR toolkit.
"""

import argparse
import logging
from pathlib import Path

import storage
from config import RunConfig
from services.env.dataset import load_dataset
from services.training import train
from utils.validation import ValidationError

logger = logging.getLogger(__name__)


async def run(args: argparse.Namespace, config: RunConfig) -> int:
    config.update({
        "aux_enabled": False if args.no_aux else None,
        "epochs_joint": args.epochs_joint,
        "epochs_posttrain": args.epochs_posttrain,
    })
    config.validate()
    out = Path(args.out)

    episodes, manifest = await load_dataset(args.data, config.train.train_splits)
    if not episodes:
        raise ValidationError(f"No episodes for splits {config.train.train_splits} in {args.data}")
    if manifest is None:
        logger.warning(f"Dataset {args.data} has no manifest")

    storage.ensure_written(await storage.save_resolved_config(out, config.to_dict()), out / storage.RESOLVED_CONFIG_FILE)
    result = await train(config, episodes, out, resume=not args.no_resume)
    logger.info(f"Trained for {len(result.log)} steps; checkpoint {result.final_checkpoint}")
    return 0


def setup(subparsers) -> None:
    """Register the train command."""
    parser = subparsers.add_parser("train", help="Train the multi-exit policy")
    parser.add_argument("--data", required=True, help="Dataset directory from gen-data")
    parser.add_argument("--out", required=True, help="Run directory for checkpoints and logs")
    parser.add_argument("--no-aux", action="store_true", help="Disable auxiliary heads and their loss")
    parser.add_argument("--epochs-joint", type=int, default=None, help="Joint-phase epochs")
    parser.add_argument("--epochs-posttrain", type=int, default=None, help="Post-training epochs")
    parser.add_argument("--no-resume", action="store_true", help="Ignore an existing resume checkpoint")
    parser.set_defaults(handler=run)
