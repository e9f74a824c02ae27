"""Seeded random streams.

A root seed fans out into named child streams (``rng.child("init")``) so that
data generation and parameter initialisation never share a sequence.  The
child key is derived from the name bytes, not from call order.
"""
from __future__ import annotations

import zlib

import numpy as np


class Rng:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.path)))
        self._children = 0

    def child(self, name: str | int) -> "Rng":
        key = name if isinstance(name, int) else zlib.crc32(str(name).encode())
        return Rng(self.seed, self.path + (key,))

    def spawn(self) -> "Rng":
        """Next anonymous child; deterministic in the number of prior spawns."""
        self._children += 1
        return Rng(self.seed, self.path + (2 ** 32 + self._children,))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    # thin pass-throughs used across the code base
    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self._gen.permutation(x)
