"""Binary representations of codes and (de)composition of per-slice indices.

Bits are MSB-first everywhere. A code over K = 2**bits values split into n_d
slices of K' = 2**(bits / n_d) values is the concatenation of each slice
index's binary form, read back as one integer.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import CodeRangeError


def log2_exact(n: int) -> int:
    b = int(n).bit_length() - 1
    if n < 1 or (1 << b) != n:
        raise ValueError(f"{n} is not a power of two")
    return b


def to_bits(i: int, m: int) -> list[int]:
    """tau_m(i): ``m``-bit MSB-first binary representation of ``i``."""
    if not 0 <= i < (1 << m):
        raise CodeRangeError(f"{i} does not fit in {m} bits")
    return [(i >> (m - 1 - b)) & 1 for b in range(m)]


def from_bits(bits: Sequence[int]) -> int:
    """Inverse of :func:`to_bits`."""
    out = 0
    for b in bits:
        if b not in (0, 1):
            raise CodeRangeError(f"bit value {b!r} is not 0 or 1")
        out = (out << 1) | int(b)
    return out


def codes_to_bits(codes, m: int) -> np.ndarray:
    """Vectorized :func:`to_bits`: [...] ints -> [..., m] of 0/1."""
    codes = np.asarray(codes, dtype=np.int64)
    shifts = np.arange(m - 1, -1, -1, dtype=np.int64)
    return (codes[..., None] >> shifts) & 1


def bits_to_codes(bits) -> np.ndarray:
    """Vectorized :func:`from_bits`: [..., m] of 0/1 -> [...] ints."""
    bits = np.asarray(bits, dtype=np.int64)
    m = bits.shape[-1]
    weights = np.int64(1) << np.arange(m - 1, -1, -1, dtype=np.int64)
    return bits @ weights


def compose_code(slice_indices: Sequence[int], slice_size: int) -> int:
    """Join per-slice indices (each in [0, K')) into one code in [0, K'**n_d)."""
    width = log2_exact(slice_size)
    code = 0
    for k in slice_indices:
        if not 0 <= int(k) < slice_size:
            raise CodeRangeError(f"slice index {k} outside [0, {slice_size})")
        code = (code << width) | int(k)
    return code


def decompose_code(code: int, n_slices: int, slice_size: int) -> list[int]:
    """Inverse of :func:`compose_code`."""
    width = log2_exact(slice_size)
    total = width * n_slices
    if not 0 <= int(code) < (1 << total):
        raise CodeRangeError(f"code {code} outside [0, {1 << total})")
    mask = slice_size - 1
    return [(int(code) >> (width * (n_slices - 1 - i))) & mask for i in range(n_slices)]


def compose_codes(indices, slice_size: int) -> np.ndarray:
    """Vectorized compose: [..., n_d] -> [...]."""
    width = log2_exact(slice_size)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= slice_size):
        raise CodeRangeError(f"slice indices outside [0, {slice_size})")
    n = indices.shape[-1]
    shifts = width * np.arange(n - 1, -1, -1, dtype=np.int64)
    return (indices << shifts).sum(axis=-1)


def decompose_codes(codes, n_slices: int, slice_size: int) -> np.ndarray:
    """Vectorized decompose: [...] -> [..., n_d]."""
    width = log2_exact(slice_size)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << (width * n_slices))):
        raise CodeRangeError(f"codes outside [0, {1 << (width * n_slices)})")
    shifts = width * np.arange(n_slices - 1, -1, -1, dtype=np.int64)
    return (codes[..., None] >> shifts) & (slice_size - 1)
