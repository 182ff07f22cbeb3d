"""Small shared helpers: FNV-1a hashing and labeled RNG streams."""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes | bytearray | memoryview) -> int:
    """64-bit FNV-1a over a byte string."""
    h = _FNV_OFFSET
    for b in bytes(data):
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def rng_for(seed: int, label: str) -> np.random.Generator:
    """Independent, reproducible generator for one named random stream.

    Every source of randomness in a run (init, split, shuffling, negatives,
    gumbel noise, probes) draws from its own labeled stream off the single
    root seed, so toggling one component never perturbs the others.
    """
    return np.random.default_rng(np.random.SeedSequence([seed, fnv1a64(label.encode())]))
