"""Seeded counter-based random streams.

Backed by numpy's Philox generator, whose output for a given key is fixed
across platforms.  Child streams are derived from (seed, *keys) so that adding
a new consumer never shifts the draws of an existing one.
"""

from __future__ import annotations

import zlib

import numpy as np


def _key(k) -> int:
    if isinstance(k, str):
        return zlib.crc32(k.encode("utf-8"))
    return int(k) & 0xFFFFFFFFFFFFFFFF


class Rng:
    def __init__(self, seed: int = 0, *keys):
        self.seed = int(seed)
        self.keys = tuple(_key(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self.keys})"

    def child(self, *keys) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, size=None, std: float = 1.0, mean: float = 0.0, dtype=np.float64):
        return (mean + std * self._gen.standard_normal(size)).astype(dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n, size=None, p=None, replace: bool = True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def permutation(self, n):
        return self._gen.permutation(n)

    def exponential(self, scale: float = 1.0, size=None):
        return self._gen.exponential(scale, size)
