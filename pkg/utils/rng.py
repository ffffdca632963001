"""
Named random streams derived from one master seed.

Every consumer asks for a stream by a tuple of names and integers, e.g.
``stream(seed, "train", "epoch", 3)``; the same key always yields the same
generator, independent of the order in which streams are requested.
"""

import zlib
from typing import Union

import numpy as np

Key = Union[str, int]


def _encode(part: Key) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def seed_sequence(master_seed: int, *key: Key) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, *(_encode(p) for p in key)])


def stream(master_seed: int, *key: Key) -> np.random.Generator:
    """Return a fresh generator for the named stream."""
    return np.random.default_rng(seed_sequence(master_seed, *key))


def derive_seed(master_seed: int, *key: Key) -> int:
    """32-bit integer seed for the named stream."""
    return int(seed_sequence(master_seed, *key).generate_state(1)[0])
