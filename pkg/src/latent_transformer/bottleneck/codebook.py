"""Per-slice codebooks trained by exponential moving averages."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .codes import log2_exact


@dataclass
class Codebook:
    """Embedding tables e^i [n_d, K', D/n_d], EMA counts c^i [n_d, K'] and decay.

    ``projections`` [n_d, D, D/n_d] is only present for projected DVQ and is
    never modified after construction.
    """

    tables: np.ndarray
    counts: np.ndarray
    decay: float
    projections: np.ndarray | None = None

    @property
    def n_slices(self) -> int:
        return self.tables.shape[0]

    @property
    def slice_size(self) -> int:
        return self.tables.shape[1]

    @property
    def slice_dim(self) -> int:
        return self.tables.shape[2]

    @property
    def code_bits(self) -> int:
        return log2_exact(self.slice_size) * self.n_slices

    @property
    def num_codes(self) -> int:
        return 1 << self.code_bits

    @classmethod
    def create(
        cls,
        dim: int,
        num_codes: int,
        n_slices: int,
        rng: np.random.Generator,
        decay: float = 0.999,
        projected: bool = False,
    ) -> "Codebook":
        bits = log2_exact(num_codes)
        if n_slices < 1 or bits % n_slices:
            raise ConfigError(f"log2 K = {bits} is not divisible by n_d = {n_slices}")
        if dim % n_slices:
            raise ConfigError(f"D = {dim} is not divisible by n_d = {n_slices}")
        if not 0.0 < decay < 1.0:
            raise ConfigError(f"EMA decay must lie in (0, 1), got {decay}")
        d = dim // n_slices
        k = 1 << (bits // n_slices)
        tables = rng.normal(0.0, 1.0 / np.sqrt(d), size=(n_slices, k, d))
        counts = np.ones((n_slices, k))
        projections = None
        if projected:
            limit = np.sqrt(6.0 / (dim + d))
            projections = rng.uniform(-limit, limit, size=(n_slices, dim, d))
        return cls(tables, counts, float(decay), projections)

    def copy(self) -> "Codebook":
        return Codebook(
            self.tables.copy(),
            self.counts.copy(),
            self.decay,
            None if self.projections is None else self.projections.copy(),
        )


def nearest(vectors: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the closest table row for each vector (squared L2, lowest index on ties)."""
    d = (
        (vectors * vectors).sum(axis=-1, keepdims=True)
        - 2.0 * vectors @ table.T
        + (table * table).sum(axis=-1)
    )
    return np.argmin(d, axis=-1)


def ema_update(book: Codebook, slice_indices: np.ndarray, enc_slices: np.ndarray) -> Codebook:
    """One EMA step over a batch of assignments, in place.

    ``slice_indices`` is [N, n_d]; ``enc_slices`` is [N, n_d, D/n_d]. Counts
    move toward the number of assigned vectors; each row moves toward the sum
    of its assigned vectors divided by the freshly updated count.
    """
    lam = book.decay
    n, K, d = book.n_slices, book.slice_size, book.slice_dim
    slice_indices = np.asarray(slice_indices, dtype=np.int64).reshape(-1, n)
    enc_slices = np.asarray(enc_slices, dtype=np.float64).reshape(-1, n, d)
    for i in range(n):
        idx = slice_indices[:, i]
        assigned = np.bincount(idx, minlength=K).astype(np.float64)
        sums = np.zeros((K, d))
        np.add.at(sums, idx, enc_slices[:, i])
        book.counts[i] = lam * book.counts[i] + (1.0 - lam) * assigned
        book.tables[i] = lam * book.tables[i] + (1.0 - lam) * sums / book.counts[i][:, None]
    return book
