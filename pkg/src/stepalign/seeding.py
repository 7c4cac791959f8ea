"""Named substreams of one root seed.

Every stage of a run draws from its own substream so stages can be re-run
or reordered without disturbing each other's randomness.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, tag: str) -> int:
    """Substream seed for (root seed, tag); stable across processes."""
    digest = hashlib.sha256(f"{int(seed)}/{tag}".encode()).digest()
    return int.from_bytes(digest[:4], "little") % (2 ** 31)


def derive_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, tag))
