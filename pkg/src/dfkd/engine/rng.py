"""Seeded, splittable random streams.

Streams are Philox (counter-based) generators keyed by a ``SeedSequence``
built from the 64-bit seed plus a derivation path. ``child(i)`` appends ``i``
to the path, so child streams are reproducible from (seed, path) alone and
independent of how much the parent stream has been consumed.
"""
from __future__ import annotations

import numpy as np

ALGORITHM = "philox4x64-seedsequence"
_U64 = (1 << 64) - 1


class Rng:
    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed) & _U64
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "Rng":
        return Rng(self.seed, self.path + (int(index),))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path})"

    # thin wrappers so call sites do not reach into numpy directly
    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)

    def truncated_normal(self, size, std=0.02, bound=2.0):
        """Normal(0, std) resampled until every draw lies within ``bound`` std."""
        out = self.generator.normal(0.0, 1.0, size)
        bad = np.abs(out) > bound
        while bad.any():
            out[bad] = self.generator.normal(0.0, 1.0, int(bad.sum()))
            bad = np.abs(out) > bound
        return out * std


def as_rng(seed_or_rng) -> Rng:
    return seed_or_rng if isinstance(seed_or_rng, Rng) else Rng(seed_or_rng)
