"""Codeword usage statistics and histogram export."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .codes import compose_codes, log2_exact


@dataclass
class UsageReport:
    counts: np.ndarray  # [n_d, K']
    fraction: float  # distinct used slice entries / (n_d * K')
    slice_fractions: list[float]
    code_fraction: float  # distinct composed codes / K
    windows: list[np.ndarray] = field(default_factory=list)

    def collapsed(self, threshold: float) -> bool:
        return self.fraction < threshold


def usage_stats(
    history: Sequence[np.ndarray],
    num_codes: int,
    n_slices: int,
    window: int | None = None,
) -> UsageReport:
    """Summarize recorded slice indices.

    ``history`` is a sequence of int arrays [N_b, n_d], one per batch. With
    ``window`` set, ``windows`` holds one histogram per ``window`` batches.
    """
    if not history:
        raise ValueError("usage_stats needs at least one recorded batch")
    bits = log2_exact(num_codes)
    if bits % n_slices:
        raise ValueError(f"log2 K = {bits} not divisible by n_d = {n_slices}")
    k = 1 << (bits // n_slices)
    batches = [np.asarray(h, dtype=np.int64).reshape(-1, n_slices) for h in history]
    all_idx = np.concatenate(batches, axis=0)
    counts = histogram(all_idx, k)
    used = (counts > 0).sum(axis=1)
    codes = compose_codes(all_idx, k) if all_idx.size else np.zeros(0, dtype=np.int64)
    windows = []
    if window:
        for start in range(0, len(batches), window):
            chunk = np.concatenate(batches[start : start + window], axis=0)
            windows.append(histogram(chunk, k))
    return UsageReport(
        counts=counts,
        fraction=float(used.sum() / (n_slices * k)),
        slice_fractions=[float(u / k) for u in used],
        code_fraction=float(np.unique(codes).size / num_codes),
        windows=windows,
    )


def histogram(slice_indices: np.ndarray, slice_size: int) -> np.ndarray:
    idx = np.asarray(slice_indices, dtype=np.int64)
    idx = idx.reshape(idx.shape[0] if idx.ndim > 1 else -1, -1)
    return np.stack(
        [np.bincount(idx[:, i], minlength=slice_size) for i in range(idx.shape[1])]
    )


def write_histogram_csv(path, bins: Iterable[tuple[int, np.ndarray]], append: bool = False) -> None:
    """Rows ``step_bin,slice,code,count`` for every nonzero entry."""
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["step_bin", "slice", "code", "count"])
        for step_bin, counts in bins:
            for s, row in enumerate(np.asarray(counts)):
                for code in np.flatnonzero(row):
                    w.writerow([int(step_bin), s, int(code), int(row[code])])


def read_histogram_csv(path) -> dict[int, dict[tuple[int, int], int]]:
    out: dict[int, dict[tuple[int, int], int]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            b = out.setdefault(int(row["step_bin"]), {})
            b[(int(row["slice"]), int(row["code"]))] = int(row["count"])
    return out
