"""Deterministic random streams.

Built on numpy's Philox counter-based generator so draws are identical
across platforms and BLAS builds. Independent child streams are derived by
hashing (seed, tag) so adding a consumer never shifts the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Rng"]


def _mix(seed, tag):
    h = hashlib.blake2b(digest_size=8)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    h.update(tag.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class Rng:
    """A named random stream with spawnable children."""

    def __init__(self, seed, tag="root"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.tag = tag
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def child(self, tag):
        """Independent stream; same (seed, tag) always yields same draws."""
        return Rng(_mix(self.seed, tag), tag=tag)

    def normal(self, shape=(), std=1.0, dtype=np.float64):
        return (self._gen.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape=(), low=0.0, high=1.0, dtype=np.float64):
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high, shape=()):
        return self._gen.integers(low, high, size=shape)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, n, size, p=None, replace=True):
        return self._gen.choice(n, size=size, p=p, replace=replace)

    def __repr__(self):
        return f"Rng(seed={self.seed}, tag='{self.tag}')"
