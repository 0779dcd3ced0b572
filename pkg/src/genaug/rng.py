"""Seeded counter-based random streams.

Every stream is a Philox generator keyed by a ``SeedSequence``, so the same
seed gives the same draws on every platform.  Substreams are keyed by
``(seed, sample_index, augmentation_index)`` which makes per-sample work
independent of scheduling order.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _words(*keys: int) -> list[int]:
    out = []
    for k in keys:
        k = int(k)
        if k < 0:
            raise ValueError(f"seed components must be non-negative, got {k}")
        k &= _MASK64
        out.extend([k & 0xFFFFFFFF, k >> 32])
    return out


class RngStream:
    """Single-owner random stream. Not safe to share between threads."""

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed) & _MASK64
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(_words(self.seed, *self.keys))
        self._gen = np.random.Generator(np.random.Philox(ss))
        self.position = 0

    @classmethod
    def substream(cls, seed: int, sample_index: int, augmentation_index: int) -> "RngStream":
        return cls(seed, sample_index, augmentation_index)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        self.position += 1
        return float(self._gen.uniform(lo, hi))

    def integers(self, lo: int, hi: int) -> int:
        """Uniform integer in ``[lo, hi)``."""
        self.position += 1
        return int(self._gen.integers(lo, hi))

    def normal(self, shape) -> np.ndarray:
        self.position += 1
        return self._gen.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        self.position += 1
        return self._gen.permutation(n)

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, keys={self.keys}, position={self.position})"
