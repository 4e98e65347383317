"""Deterministic seed derivation.

Every random draw in the package flows through a numpy Generator whose seed
is derived from a master seed plus integer tags via a splitmix64 chain, so any
execution order (serial, threaded, multi-process) produces identical streams.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One splitmix64 scrambling round; a stable 64-bit integer hash."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def derive_seed(master: int, *tags: int) -> int:
    """Mix a master seed with integer tags into an independent 64-bit seed."""
    s = splitmix64(master & _MASK64)
    for t in tags:
        s = splitmix64(s ^ (t & _MASK64))
    return s


def make_rng(master: int, *tags: int) -> np.random.Generator:
    """PCG64 generator seeded by ``derive_seed(master, *tags)``."""
    return np.random.Generator(np.random.PCG64(derive_seed(master, *tags)))
