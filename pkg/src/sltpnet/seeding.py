"""Named random sub-streams derived from a single master seed."""
from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``.

    Streams with different names or keys do not overlap, so a module can be
    re-seeded without disturbing any other.
    """
    entropy = [int(seed), zlib.crc32(name.encode("utf-8"))] + [int(k) for k in keys]
    return np.random.default_rng(entropy)
