"""Counter-based RNG derivation: independent, reproducible streams per (seed, step, purpose)."""

from __future__ import annotations

import zlib

import numpy as np


def _to_word(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key) & 0xFFFFFFFF


def rng_for(*keys) -> np.random.Generator:
    """Derive a Generator from a tuple of int/str keys.

    The same keys always produce the same stream, independent of call order,
    so parallel workers and restarted runs draw identical randomness.
    """
    return np.random.default_rng(np.random.SeedSequence([_to_word(k) for k in keys]))
