"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, no_grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Relative error between analytic and central-difference gradients, per parameter.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values. With ``max_entries`` only that many randomly chosen entries of
    each parameter are perturbed, and the comparison uses those entries.
    """
    for p in params.values():
        p.grad = None
    backward(loss_fn())
    rng = rng or np.random.default_rng(0)
    errors = {}
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                old = flat[i]
                flat[i] = old + h
                up = float(loss_fn().data)
                flat[i] = old - h
                down = float(loss_fn().data)
                flat[i] = old
                numeric[j] = (up - down) / (2 * h)
        errors[name] = relative_error(analytic.reshape(-1)[idx], numeric)
    for p in params.values():
        p.grad = None
    return errors
