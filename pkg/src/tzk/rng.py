"""Deterministic random streams split hierarchically from one 64-bit seed.

Every consumer of randomness derives its own stream from (seed, *path), so
training is resumable: the stream for step k is a pure function of the seed
and k, never of how many draws earlier steps consumed.
"""

import zlib

import numpy as np


def _word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *path) -> np.random.Generator:
    """Return an independent generator for the purpose named by `path`."""
    return np.random.default_rng([_word(seed)] + [_word(p) for p in path])
