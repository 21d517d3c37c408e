"""Discretization bottlenecks: Gumbel-Softmax, improved semantic hashing, (decomposed) VQ.

Every bottleneck maps encoder states ``enc`` [..., m, D] to a
:class:`BottleneckOutput` holding the decoder input ``z_q``, the integer code
``z_d`` in [0, K), the per-slice indices and an auxiliary loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import ops
from ..autodiff.random import NoiseSource, gaussian_noise, gumbel_noise
from ..autodiff.tensor import Tensor, as_tensor, parameter
from ..errors import CodeRangeError, ConfigError, DimensionError
from ..nn import Linear, Module
from .codebook import Codebook, ema_update, nearest
from .codes import bits_to_codes, codes_to_bits, compose_codes, decompose_codes, log2_exact

TRAIN, EVAL = "train", "eval"


@dataclass
class BottleneckOutput:
    z_q: Tensor
    z_d: np.ndarray
    slice_indices: np.ndarray
    aux_loss: Tensor
    usage_counts: np.ndarray
    # DVQ only: the (sliced or projected) encoder vectors, for the EMA step
    enc_slices: np.ndarray | None = None


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, EVAL):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")


def _usage(slice_indices: np.ndarray, slice_size: int, mask) -> np.ndarray:
    n = slice_indices.shape[-1]
    flat = slice_indices.reshape(-1, n)
    if mask is not None:
        flat = flat[np.asarray(mask, dtype=bool).reshape(-1)]
    return np.stack([np.bincount(flat[:, i], minlength=slice_size) for i in range(n)])


def _masked_mean(per_position: Tensor, mask) -> Tensor:
    if mask is None:
        return ops.mean(per_position)
    w = np.asarray(mask, dtype=np.float64)
    return ops.sum(per_position * w) * (1.0 / max(w.sum(), 1.0))


# --------------------------------------------------------------------- functional


def gumbel_softmax(
    enc,
    W,
    e,
    temperature: float = 0.5,
    mode: str = TRAIN,
    noise: NoiseSource | None = None,
    mask=None,
) -> BottleneckOutput:
    """Logits l = enc W^T over K codes.

    Training feeds the decoder the soft mixture softmax((l + g) / temperature) e
    with Gumbel noise g; evaluation picks row argmax(l) of ``e``.
    """
    _check_mode(mode)
    enc, W, e = as_tensor(enc), as_tensor(W), as_tensor(e)
    K = W.shape[0]
    logits = ops.matmul(enc, ops.swap_last(W))
    z_d = np.argmax(logits.data, axis=-1)
    if mode == TRAIN:
        if temperature <= 0:
            raise ValueError("Gumbel-Softmax temperature must be positive")
        if noise is None:
            raise ValueError("training mode needs a noise source")
        g = gumbel_noise(noise, logits.shape, name="gumbel")
        w = ops.softmax((logits + g) * (1.0 / temperature), axis=-1)
        z_q = ops.matmul(w, e)
    else:
        z_q = ops.embedding(e, z_d)
    idx = z_d[..., None]
    return BottleneckOutput(z_q, z_d, idx, Tensor(0.0), _usage(idx, K, mask))


def semhash(
    enc,
    e1,
    e2,
    mode: str = TRAIN,
    noise: NoiseSource | None = None,
    mask=None,
) -> BottleneckOutput:
    """Improved semantic hashing on bit scores ``enc`` [..., m, log2 K].

    f = sat_sigmoid(enc + noise) in training (no noise in eval); g = [f > 0.5].
    The decoder input is sum_i h_i e1_i + (1 - h_i) e2_i where h is f or g
    (each with probability 1/2 per latent position) during training and g in
    eval. The g branch passes gradients straight through to f.
    """
    _check_mode(mode)
    enc, e1, e2 = as_tensor(enc), as_tensor(e1), as_tensor(e2)
    bits = e1.shape[0]
    if enc.shape[-1] != bits:
        raise DimensionError(f"semhash: scores have {enc.shape[-1]} columns, need {bits}")
    # noise-free bits define the code in both modes
    clean_bits = ops.saturating_sigmoid_values(enc.data) > 0.5
    if mode == TRAIN:
        if noise is None:
            raise ValueError("training mode needs a noise source")
        f = ops.saturating_sigmoid(enc + gaussian_noise(noise, enc.shape, name="semhash"))
        g_val = (f.data > 0.5).astype(np.float64)
        g = f + ops.stop_gradient(g_val - f.data)
        pick_f = (noise.uniform("semhash_mix", enc.shape[:-1] + (1,)) < 0.5).astype(np.float64)
        h = f * pick_f + g * (1.0 - pick_f)
    else:
        h = Tensor(clean_bits.astype(np.float64))
    z_q = ops.matmul(h, e1) + ops.matmul(1.0 - h, e2)
    z_d = bits_to_codes(clean_bits.astype(np.int64))
    idx = z_d[..., None]
    return BottleneckOutput(z_q, z_d, idx, Tensor(0.0), _usage(idx, 1 << bits, mask))


def dvq(
    enc,
    book: Codebook,
    mode: str = TRAIN,
    beta: float = 0.25,
    squared: bool = True,
    mask=None,
) -> BottleneckOutput:
    """Decomposed vector quantization (n_d = 1 is plain VQ-VAE).

    Each slice (or fixed projection, when ``book.projections`` is set) of
    ``enc`` is replaced by its nearest row in that slice's table. In training
    the decoder input is enc' + sg(z_q - enc'), whose value is z_q while the
    gradient reaches ``enc``. ``aux_loss`` is beta * sum_i ||enc^i - sg(z_q^i)||^2
    averaged over (unmasked) positions.
    """
    _check_mode(mode)
    enc = as_tensor(enc)
    n, K, d = book.n_slices, book.slice_size, book.slice_dim
    D = enc.shape[-1]
    if D % n or D // n != d:
        raise DimensionError(f"dvq: encoder width {D} incompatible with {n} slices of {d}")
    lead = enc.shape[:-1]
    if book.projections is not None:
        proj = np.concatenate(list(book.projections), axis=-1)  # [D, n*d]
        flat = ops.matmul(enc, proj)
    else:
        flat = enc
    sl = flat.data.reshape(lead + (n, d))
    k = np.stack([nearest(sl[..., i, :], book.tables[i]) for i in range(n)], axis=-1)
    zq = np.concatenate([book.tables[i][k[..., i]] for i in range(n)], axis=-1)
    if mode == TRAIN:
        z_q = flat + ops.stop_gradient(zq - flat.data)
    else:
        z_q = Tensor(zq)
    diff = flat - zq
    per_slice = ops.sum(ops.square(diff).reshape(lead + (n, d)), axis=-1)
    if not squared:
        per_slice = ops.power(per_slice + 1e-12, 0.5)
    aux = _masked_mean(ops.sum(per_slice, axis=-1), mask) * beta
    z_d = compose_codes(k, K)
    return BottleneckOutput(z_q, z_d, k, aux, _usage(k, K, mask), enc_slices=sl)


# --------------------------------------------------------------------- modules


class Bottleneck(Module):
    """Common surface: ``forward`` / ``embed_codes`` and the code layout."""

    kind = ""
    n_slices = 1

    @property
    def code_bits(self) -> int:
        raise NotImplementedError

    @property
    def num_codes(self) -> int:
        return 1 << self.code_bits

    @property
    def slice_size(self) -> int:
        return 1 << (self.code_bits // self.n_slices)

    def _check_codes(self, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if codes.size and (codes.min() < 0 or codes.max() >= self.num_codes):
            raise CodeRangeError(f"codes outside [0, {self.num_codes})")
        return codes

    def after_step(self, out: BottleneckOutput, mask=None) -> None:
        """Non-gradient state updates after a training forward pass."""

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        pass


class GumbelBottleneck(Bottleneck):
    kind = "gumbel"

    def __init__(self, dim: int, bits: int, rng: np.random.Generator, temperature: float = 0.5):
        K = 1 << bits
        self._bits = bits
        self.W = parameter(rng.normal(0.0, dim**-0.5, size=(K, dim)))
        self.e = parameter(rng.normal(0.0, dim**-0.5, size=(K, dim)))
        self.temperature = temperature

    @property
    def code_bits(self) -> int:
        return self._bits

    def forward(self, enc, mode=TRAIN, noise=None, mask=None):
        return gumbel_softmax(enc, self.W, self.e, self.temperature, mode, noise, mask)

    def embed_codes(self, codes) -> Tensor:
        return ops.embedding(self.e, self._check_codes(codes))


class SemhashBottleneck(Bottleneck):
    kind = "semhash"

    def __init__(self, dim: int, bits: int, rng: np.random.Generator):
        self._bits = bits
        self.proj = Linear(dim, bits, rng)
        self.e1 = parameter(rng.normal(0.0, dim**-0.5, size=(bits, dim)))
        self.e2 = parameter(rng.normal(0.0, dim**-0.5, size=(bits, dim)))

    @property
    def code_bits(self) -> int:
        return self._bits

    def forward(self, enc, mode=TRAIN, noise=None, mask=None):
        return semhash(self.proj(enc), self.e1, self.e2, mode, noise, mask)

    def embed_codes(self, codes) -> Tensor:
        h = codes_to_bits(self._check_codes(codes), self._bits).astype(np.float64)
        return ops.matmul(h, self.e1) + ops.matmul(1.0 - h, self.e2)


class DVQBottleneck(Bottleneck):
    """Sliced or projected decomposed VQ with an EMA-trained codebook."""

    kind = "dvq"

    def __init__(
        self,
        dim: int,
        bits: int,
        n_slices: int,
        rng: np.random.Generator,
        projected: bool = False,
        decay: float = 0.999,
        beta: float = 0.25,
        squared: bool = True,
    ):
        self.book = Codebook.create(dim, 1 << bits, n_slices, rng, decay, projected)
        self.n_slices = n_slices
        self.beta = beta
        self.squared = squared

    @property
    def code_bits(self) -> int:
        return self.book.code_bits

    def forward(self, enc, mode=TRAIN, noise=None, mask=None):
        return dvq(enc, self.book, mode, self.beta, self.squared, mask)

    def after_step(self, out: BottleneckOutput, mask=None) -> None:
        idx, sl = out.slice_indices, out.enc_slices
        n, d = self.book.n_slices, self.book.slice_dim
        idx = idx.reshape(-1, n)
        sl = sl.reshape(-1, n, d)
        if mask is not None:
            keep = np.asarray(mask, dtype=bool).reshape(-1)
            idx, sl = idx[keep], sl[keep]
        ema_update(self.book, idx, sl)

    def embed_codes(self, codes) -> Tensor:
        k = decompose_codes(self._check_codes(codes), self.n_slices, self.slice_size)
        return Tensor(
            np.concatenate([self.book.tables[i][k[..., i]] for i in range(self.n_slices)], axis=-1)
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"tables": self.book.tables, "counts": self.book.counts}
        if self.book.projections is not None:
            out["projections"] = self.book.projections
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.book.tables = np.array(arrays["tables"], dtype=np.float64)
        self.book.counts = np.array(arrays["counts"], dtype=np.float64)
        if "projections" in arrays:
            self.book.projections = np.array(arrays["projections"], dtype=np.float64)


def make_bottleneck(
    kind: str,
    dim: int,
    bits: int,
    rng: np.random.Generator,
    n_slices: int = 1,
    projected: bool = False,
    decay: float = 0.999,
    beta: float = 0.25,
    squared: bool = True,
    temperature: float = 0.5,
) -> Bottleneck:
    log2_exact(1 << bits)
    if kind == "gumbel":
        return GumbelBottleneck(dim, bits, rng, temperature)
    if kind == "semhash":
        return SemhashBottleneck(dim, bits, rng)
    if kind in ("dvq", "vq"):
        if kind == "vq":
            n_slices = 1
        return DVQBottleneck(dim, bits, n_slices, rng, projected, decay, beta, squared)
    raise ConfigError(f"unknown bottleneck kind {kind!r}")
