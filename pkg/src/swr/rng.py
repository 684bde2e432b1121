"""Splittable counter-based random streams.

Every stream is a Philox generator keyed by a hash of ``(seed, *path)``, so a
child stream such as ``rng.split("stage2", epoch)`` depends only on its path
and never on how many numbers other streams have drawn.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, path: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((int(seed),) + tuple(str(p) for p in path)).encode())
    return int.from_bytes(h.digest(), "little")


def derive_seed(seed: int, *path) -> int:
    """Stable 31-bit integer seed for a named sub-stream."""
    return _key(seed, path) & 0x7FFFFFFF


class Rng:
    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_key(self.seed, self.path)))

    def split(self, *keys) -> "Rng":
        return Rng(self.seed, self.path + tuple(keys))

    def uniform(self, size=None, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size).astype(np.float32)

    def normal(self, size=None, scale=1.0) -> np.ndarray:
        return (self._gen.standard_normal(size) * scale).astype(np.float32)

    def gumbel(self, size=None) -> np.ndarray:
        # float64 draw keeps -log(-log u) finite near u -> 0 or 1
        u = self._gen.uniform(np.finfo(np.float64).tiny, 1.0, size)
        return (-np.log(-np.log(u))).astype(np.float32)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def scalar(self) -> float:
        return float(self._gen.uniform())

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"
