"""Seed fan-out and independent random substreams."""
import hashlib
from typing import Union

import numpy as np


Key = Union[int, str]


def derive_seed(seed: int, *keys: Key) -> int:
    """
    Derive a 63-bit child seed from a parent seed and a path of keys.

    The mapping is a stable hash, so adding a new key (e.g. a new method)
    never changes the seed handed to an existing one.
    """
    material = "|".join([str(int(seed))] + [str(k) for k in keys])
    digest = hashlib.md5(material.encode("utf-8")).hexdigest()
    return int(digest[:16], 16) & ((1 << 63) - 1)


def substream(seed: int, *keys: Key) -> np.random.Generator:
    """Return a PCG64 generator for the substream (seed, *keys)."""
    return np.random.default_rng(derive_seed(seed, *keys))


def draw_seed(rng: np.random.Generator) -> int:
    """Draw a fresh base seed from an existing generator."""
    return int(rng.integers(0, 2**63 - 1))
