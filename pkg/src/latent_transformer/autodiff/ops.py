"""Differentiable operations on :class:`Tensor`.

Each op computes its forward value with numpy and registers a closure that maps
the output gradient to one gradient per parent (``None`` where no gradient
flows). Binary elementwise ops broadcast like numpy and sum gradients back to
the operand shapes.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, EmptySourceError, LengthError
from .tensor import Tensor, as_tensor, make_result

LAYER_NORM_EPS = 1e-6
_NEG_INF = -1e30


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_result(
        "mul", ad * bd, (a, b),
        lambda g: (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result(
        "div", out, (a, b),
        lambda g: (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result(
        "power", x**exponent, (a,),
        lambda g: (g * exponent * x ** (exponent - 1),),
    )


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result("square", x * x, (a,), lambda g: (2.0 * g * x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return make_result("log", np.log(x), (a,), lambda g: (g / x,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def saturating_sigmoid_values(x: np.ndarray) -> np.ndarray:
    s = 0.5 * (np.tanh(0.5 * np.asarray(x, dtype=np.float64)) + 1.0)
    # (12 s - 1) / 10 rather than 1.2 s - 0.1 so that x = 0 maps to exactly 0.5
    return np.clip((12.0 * s - 1.0) / 10.0, 0.0, 1.0)


def saturating_sigmoid(a) -> Tensor:
    """max(0, min(1, 1.2*sigmoid(x) - 0.1)); zero gradient where clipped."""
    a = as_tensor(a)
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    raw = (12.0 * s - 1.0) / 10.0
    out = np.clip(raw, 0.0, 1.0)
    inside = (raw > 0.0) & (raw < 1.0)
    return make_result(
        "saturating_sigmoid", out, (a,),
        lambda g: (g * 1.2 * s * (1.0 - s) * inside,),
    )


def stop_gradient(a) -> Tensor:
    """Identity on values, severs the graph: contributes no gradient to ``a``."""
    a = as_tensor(a)
    return Tensor(a.data)


# ------------------------------------------------------------------ reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_result(
        "transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),)
    )


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic(index)

    def bw(g):
        out = np.zeros(shape)
        if basic:
            out[index] += g
        else:
            np.add.at(out, index, g)
        return (out,)

    return make_result("getitem", a.data[index], (a,), bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(
        "concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw
    )


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result("matmul", ad @ bd, (a, b), bw)


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias) with weight stored as [d_in, d_out]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear shape mismatch: {x.shape} @ {weight.shape}")
    xd, wd = x.data, weight.data
    # one 2-D GEMM instead of a batched matmul over leading axes
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        gb = None
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result("linear", out, parents, bw)


# ------------------------------------------------------------------ softmax family


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (a,), bw)


def cross_entropy(logits, targets, ignore_index: int | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    Positions whose target equals ``ignore_index`` are excluded from the mean.
    The returned value is also the per-token log-perplexity (natural log).
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != t.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {t.shape}")
    V = logits.shape[-1]
    flat = logits.data.reshape(-1, V)
    tf = t.reshape(-1)
    keep = np.ones(tf.shape, dtype=bool) if ignore_index is None else tf != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is padding; mean is undefined")
    if np.any((tf[keep] < 0) | (tf[keep] >= V)):
        raise ValueError(f"cross_entropy: targets outside [0, {V})")
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe_t = np.where(keep, tf, 0)
    rows = np.arange(tf.shape[0])
    nll = -logp[rows, safe_t]
    loss = float(nll[keep].sum() / n)
    shape = logits.shape

    def bw(g):
        grad = np.exp(logp)
        grad[rows, safe_t] -= 1.0
        grad *= keep[:, None] * (float(g) / n)
        return (grad.reshape(shape),)

    return make_result("cross_entropy", np.array(loss), (logits,), bw)


# ------------------------------------------------------------------ layers as ops


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            gx = inv / d * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        g2 = g.reshape(-1, d)
        ggain = (g2 * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None
        gbias = g2.sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return make_result("layer_norm", out, (x, gain, bias), bw)


def conv1d(x, kernel, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation along the length axis.

    ``x`` is [len, d_in] or [batch, len, d_in]; ``kernel`` is [k, d_in, d_out].
    ``same`` padding (stride 1 only) zero-pads so the length is preserved;
    ``valid`` uses no padding and yields floor((len - k) / stride) + 1 outputs.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride not in (1, 2):
        raise ValueError(f"conv1d: stride must be 1 or 2, got {stride}")
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    k, d_in, d_out = kernel.shape
    if xd.shape[-1] != d_in:
        raise DimensionError(f"conv1d: input {x.shape} vs kernel {kernel.shape}")
    B, L, _ = xd.shape
    if padding == "same":
        if stride != 1:
            raise ValueError("conv1d: same padding is only defined for stride 1")
        left = (k - 1) // 2
        right = k - 1 - left
        xp = np.pad(xd, ((0, 0), (left, right), (0, 0))) if k > 1 else xd
        L_out = L
    elif padding == "valid":
        if L < k:
            raise LengthError(f"conv1d: length {L} shorter than kernel {k} with valid padding")
        left = 0
        xp = xd
        L_out = (L - k) // stride + 1
    else:
        raise ValueError(f"conv1d: unknown padding {padding!r}")
    span = stride * (L_out - 1) + 1
    W = kernel.data
    out = np.zeros((B, L_out, d_out))
    for j in range(k):
        out += xp[:, j : j + span : stride] @ W[j]

    def bw(g):
        g3 = g[None] if squeeze else g
        gk = None
        if kernel.requires_grad:
            g2 = g3.reshape(-1, d_out)
            gk = np.stack(
                [xp[:, j : j + span : stride].reshape(-1, d_in).T @ g2 for j in range(k)]
            )
        gx = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for j in range(k):
                gxp[:, j : j + span : stride] += g3 @ W[j].T
            gx = gxp[:, left : left + L]
            if squeeze:
                gx = gx[0]
        return gx, gk

    return make_result("conv1d", out[0] if squeeze else out, (x, kernel), bw)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; gradients scatter-add into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    V, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"embedding: ids outside [0, {V})")

    def bw(g):
        out = np.zeros((V, d))
        np.add.at(out, ids.reshape(-1), g.reshape(-1, d))
        return (out,)

    return make_result("embedding", table.data[ids], (table,), bw)


def attention(queries, keys, values, mask=None, causal: bool = False) -> Tensor:
    """Scaled dot-product attention softmax(q k^T / sqrt(d)) v over the last two axes.

    ``mask`` is a boolean array broadcastable to [..., n_q, n_k]; True marks
    allowed positions. ``causal`` additionally forbids keys after the query.
    """
    q, k, v = as_tensor(queries), as_tensor(keys), as_tensor(values)
    n_q, n_k = q.shape[-2], k.shape[-2]
    if n_k == 0:
        raise EmptySourceError("attention over an empty source")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape}")
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    allowed = None
    if causal:
        allowed = np.tril(np.ones((n_q, n_k), dtype=bool))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        allowed = mask if allowed is None else (allowed & mask)
    if allowed is not None:
        scores = scores + np.where(allowed, 0.0, _NEG_INF)
    return matmul(softmax(scores, axis=-1), v)
