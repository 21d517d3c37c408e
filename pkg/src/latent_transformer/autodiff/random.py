"""Reproducible noise from a counter-based generator (Philox).

A :class:`NoiseSource` derives an independent Philox stream for every call from
``(run seed, stream name, call index)``. Restoring the per-name call counters is
therefore enough to resume a run bit-identically.
"""

from __future__ import annotations

import zlib

import numpy as np

from .tensor import Tensor


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class NoiseSource:
    def __init__(self, seed: int, counters: dict[str, int] | None = None):
        self.seed = int(seed)
        self.counters: dict[str, int] = dict(counters or {})

    def generator(self, name: str) -> np.random.Generator:
        """Fresh generator for the next call of stream ``name``."""
        idx = self.counters.get(name, 0)
        self.counters[name] = idx + 1
        ss = np.random.SeedSequence([self.seed, _name_key(name), idx])
        return np.random.Generator(np.random.Philox(ss))

    def state(self) -> dict[str, int]:
        return dict(sorted(self.counters.items()))

    def uniform(self, name: str, shape) -> np.ndarray:
        return self.generator(name).random(shape)

    def normal(self, name: str, shape) -> np.ndarray:
        return self.generator(name).standard_normal(shape)


def gumbel_from_uniform(u) -> np.ndarray:
    """g = -log(-log u)."""
    return -np.log(-np.log(np.asarray(u, dtype=np.float64)))


def gaussian_noise(source: NoiseSource, shape, name: str = "gaussian") -> Tensor:
    return Tensor(source.normal(name, shape))


def gumbel_noise(source: NoiseSource, shape, name: str = "gumbel") -> Tensor:
    u = source.uniform(name, shape)
    # u == 0 has probability ~2^-53 but would give -inf
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-16)
    return Tensor(gumbel_from_uniform(u))
