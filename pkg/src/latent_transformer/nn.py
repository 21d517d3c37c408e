"""Small module system and the transformer/convolution layers built on autodiff."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, parameter


class Module:
    """Parameters are Tensor attributes; children are Module attributes or lists of them."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(glorot(rng, d_in, d_out))
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, num: int, dim: int, rng: np.random.Generator, std: float | None = None):
        std = dim**-0.5 if std is None else std
        self.table = parameter(rng.normal(0.0, std, size=(num, dim)))

    def forward(self, ids):
        return ops.embedding(self.table, ids)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))

    def forward(self, x):
        return ops.layer_norm(x, self.gain, self.bias)


class Conv1d(Module):
    def __init__(
        self,
        kernel_size: int,
        d_in: int,
        d_out: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: str = "same",
    ):
        shape = (kernel_size, d_in, d_out)
        self.kernel = parameter(glorot(rng, kernel_size * d_in, d_out, shape))
        self.bias = parameter(np.zeros(d_out))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv1d(x, self.kernel, self.stride, self.padding) + self.bias


class MultiHeadAttention(Module):
    """Dot-product attention with ``heads`` heads and an output projection."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"hidden size {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        B, L, D = x.shape
        return x.reshape(B, L, self.heads, D // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor, memory: Tensor | None = None, mask=None, causal: bool = False):
        """``x`` [B, Lq, D] attends to ``memory`` [B, Lk, D] (itself when None).

        ``mask`` is a boolean key mask [B, Lk] (True = attend).
        """
        memory = x if memory is None else memory
        B, Lq, D = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(memory)), self._split(self.v(memory))
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)[:, None, None, :]
        ctx = ops.attention(q, k, v, mask=mask, causal=causal)
        ctx = ctx.transpose(0, 2, 1, 3).reshape(B, Lq, D)
        return self.out(ctx)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.inner = Linear(dim, hidden, rng)
        self.outer = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.outer(ops.relu(self.inner(x)))


class EncoderLayer(Module):
    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, hidden, rng)

    def forward(self, x, mask=None):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ff(self.norm2(x))


class DecoderLayer(Module):
    """Causal self-attention, attention to an encoded source, feed-forward."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm3 = LayerNorm(dim)
        self.ff = FeedForward(dim, hidden, rng)

    def forward(self, x, memory, memory_mask=None):
        x = x + self.self_attn(self.norm1(x), causal=True)
        x = x + self.cross_attn(self.norm2(x), memory, mask=memory_mask)
        return x + self.ff(self.norm3(x))


class SourceEncoder(Module):
    """Token + learned position embeddings followed by self-attention layers."""

    def __init__(self, vocab: int, max_len: int, dim: int, heads: int, hidden: int,
                 layers: int, rng: np.random.Generator):
        self.embed = Embedding(vocab, dim, rng)
        self.pos = Embedding(max_len, dim, rng, std=0.1)
        self.layers = [EncoderLayer(dim, heads, hidden, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)

    def forward(self, ids: np.ndarray, mask: np.ndarray) -> Tensor:
        L = ids.shape[1]
        h = self.embed(ids) * math.sqrt(self.embed.table.shape[1]) + self.pos(np.arange(L))
        for layer in self.layers:
            h = layer(h, mask=mask)
        return self.norm(h)


class ResidualBlock(Module):
    """Three rounds of (relu, conv k=3 s=1, layer-norm), then add the input."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.convs = [Conv1d(3, dim, dim, rng) for _ in range(3)]
        self.norms = [LayerNorm(dim) for _ in range(3)]

    def forward(self, s: Tensor) -> Tensor:
        h = s
        for conv, norm in zip(self.convs, self.norms):
            h = norm(conv(ops.relu(h)))
        return s + h
