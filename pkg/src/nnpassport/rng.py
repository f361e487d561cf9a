"""Seeded random streams. Every consumer asks for a named substream of one seed."""
from __future__ import annotations

import zlib

import numpy as np


def stream(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``; stable across runs and platforms."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(n.encode()) if isinstance(n, str) else int(n))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
