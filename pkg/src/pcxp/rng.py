"""Deterministic, splittable random streams.

Built on numpy's Philox bit generator, which is counter-based: the stream
for a given key is identical on every platform and does not depend on how
many values other streams have consumed. Child streams are derived from
(root seed, path of tags), never from call order, so reordering unrelated
draws cannot shift anything downstream.
"""

from __future__ import annotations

import zlib

import numpy as np


def _tag_to_int(tag) -> int:
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    return int(tag) & 0xFFFFFFFF


class Rng:
    """One random stream plus the recipe for deriving independent children."""

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(_tag_to_int(t) for t in _path)
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def child(self, *tags) -> "Rng":
        """Derive an independent stream keyed by (seed, path + tags)."""
        return Rng(self.seed, self.path + tuple(tags))

    # draws ----------------------------------------------------------------

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def trunc_normal(self, size, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) resampled until every value lies in [-bound*std, bound*std]."""
        out = self._gen.normal(0.0, std, size)
        limit = bound * std
        bad = np.abs(out) > limit
        while bad.any():
            out[bad] = self._gen.normal(0.0, std, int(bad.sum()))
            bad = np.abs(out) > limit
        return out
