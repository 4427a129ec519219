"""Named random streams derived from a single run seed."""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name (independent of PYTHONHASHSEED)."""
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Return the generator for stream ``name`` of run ``seed``.

    Extra integers (clip index, epoch, ...) split the stream further, so any
    component can be reproduced without replaying the others.
    """
    entropy = [int(seed), stream_key(name), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(entropy))
