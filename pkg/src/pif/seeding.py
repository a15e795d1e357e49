"""Named random sub-streams derived from one 64-bit run seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("pretrain", "init", "shuffle", "dropout", "mask", "data")


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for ``name``; the same (seed, name) always matches."""
    return np.random.default_rng([int(seed) & (2**64 - 1), zlib.crc32(name.encode("utf-8"))])
