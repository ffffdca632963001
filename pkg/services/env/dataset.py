"""
Demonstration dataset: generation, JSONL persistence and split helpers.
"""

import logging
import math
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

import storage
from config import EnvConfig
from models import DatasetManifest, Episode
from services.env.chains import generate_chain
from utils.rng import stream

logger = logging.getLogger(__name__)

EPISODES_FILE = "episodes.jsonl"
MANIFEST_FILE = "manifest.json"


def generate_dataset(n_episodes: int, splits: Sequence[str], seed: int,
                     env: Optional[EnvConfig] = None) -> Tuple[List[Episode], DatasetManifest]:
    """
    Roll the expert through task chains until ``n_episodes`` subtasks exist.

    Chain k draws from ``splits[k % len(splits)]`` with its own random stream,
    so the result depends only on (n_episodes, splits, seed, env).
    """
    env = env or EnvConfig()
    episodes: List[Episode] = []
    rejected = 0
    k = 0
    while len(episodes) < n_episodes:
        split = splits[k % len(splits)]
        _, chain_episodes, chain_rejected = generate_chain(split, stream(seed, "data", "chain", k), env)
        rejected += chain_rejected
        episodes.extend(chain_episodes)
        k += 1
    episodes = episodes[:n_episodes]

    for episode in episodes:
        if not episode.success or len(episode) > env.t_max:
            raise RuntimeError(f"expert episode failed or exceeded T_max ({len(episode)} steps)")

    mean_len = float(np.mean([len(e) for e in episodes])) if episodes else 0.0
    manifest = DatasetManifest(
        n_episodes=len(episodes),
        mean_len=mean_len,
        seed=seed,
        splits=list(splits),
        rejected=rejected,
        config=asdict(env),
    )
    logger.info(f"Generated {len(episodes)} episodes from {k} chains (mean length {mean_len:.2f}, {rejected} rejected scenarios)")
    return episodes, manifest


async def write_dataset(out_dir, episodes: List[Episode], manifest: DatasetManifest) -> bool:
    out = Path(out_dir)
    ok = await storage.write_jsonl(out / EPISODES_FILE, (e.to_dict() for e in episodes))
    ok = ok and await storage.save_json(out / MANIFEST_FILE, manifest.to_dict())
    if ok:
        logger.info(f"Dataset written to {out}")
    return ok


async def load_dataset(data_dir, splits: Optional[Sequence[str]] = None) -> Tuple[List[Episode], Optional[DatasetManifest]]:
    """Episodes (optionally filtered by split letters) and the manifest."""
    base = Path(data_dir)
    rows = await storage.read_jsonl(base / EPISODES_FILE)
    episodes = [Episode.from_dict(r) for r in rows]
    if splits:
        wanted = set(splits)
        episodes = [e for e in episodes if e.split in wanted]
    manifest_data = await storage.load_json(base / MANIFEST_FILE)
    manifest = DatasetManifest.from_dict(manifest_data) if manifest_data else None
    return episodes, manifest


def subsample(episodes: List[Episode], fraction: float, seed: int, name: str = "subsample") -> List[Episode]:
    """Deterministic fraction of ``episodes`` (at least one), original order kept."""
    if fraction >= 1.0 or not episodes:
        return list(episodes)
    count = max(1, int(math.ceil(fraction * len(episodes))))
    picks = np.sort(stream(seed, name).permutation(len(episodes))[:count])
    return [episodes[i] for i in picks]


def split_holdout(episodes: List[Episode], fraction: float, seed: int) -> Tuple[List[Episode], List[Episode]]:
    """(train, validation) partition with ``fraction`` of episodes held out."""
    if fraction <= 0.0 or len(episodes) < 2:
        return list(episodes), []
    count = min(len(episodes) - 1, max(1, int(round(fraction * len(episodes)))))
    held = set(stream(seed, "holdout").permutation(len(episodes))[:count].tolist())
    train = [e for i, e in enumerate(episodes) if i not in held]
    val = [e for i, e in enumerate(episodes) if i in held]
    return train, val
