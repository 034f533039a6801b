"""Seeded xoshiro256** generator with splitmix64 seeding.

Used for weight initialisation, block origin draws and epoch shuffles so
that all of them are reproducible bit-for-bit on any platform.
"""
from __future__ import annotations

import numpy as np

from . import kernels

_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> list[int]:
    out = []
    x = seed & _MASK64
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) & _MASK64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        out.append(z ^ (z >> 31))
    return out


class Xoshiro256:
    def __init__(self, seed: int):
        self.state = np.array(splitmix64(seed, 4), dtype=np.uint64)

    def raw(self, n: int) -> np.ndarray:
        return kernels.xoshiro_fill(self.state, int(n))

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """n doubles in [low, high) from the top 53 bits of each draw."""
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return low + (high - low) * u

    def integers(self, n: int, high: int) -> np.ndarray:
        """n integers on [0, high), scaled from 53-bit uniforms."""
        if high <= 0:
            raise ValueError("high must be positive")
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.uniform(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
