"""Keyed random streams.

Every random draw in the package comes from a generator keyed by
``(seed, tag, *index)``. A row, an iteration or a sweep cell always sees the
same numbers no matter which worker handles it or in which order.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _word(x) -> int:
    if isinstance(x, str):
        return zlib.crc32(x.encode("utf-8"))
    return int(x) & _MASK64


def _entropy(seed: int, tag: str, index: tuple) -> list[int]:
    return [int(seed) & _MASK64, _word(tag)] + [_word(i) for i in index]


def stream(seed: int, tag: str, *index) -> np.random.Generator:
    """Independent generator for the key ``(seed, tag, *index)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(_entropy(seed, tag, index))))


def derive_seed(seed: int, tag: str, *index) -> int:
    """A 63-bit child seed, used to hand a sub-experiment its own seed."""
    ss = np.random.SeedSequence(_entropy(seed, tag, index))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
