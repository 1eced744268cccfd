"""Named random substreams derived from a single root seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Generator for stream ``name`` under ``seed``; independent of call order."""
    seq = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=(zlib.crc32(name.encode()),))
    return np.random.default_rng(seq)
