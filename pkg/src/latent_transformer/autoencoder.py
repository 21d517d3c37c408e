"""The autoencoder pair: ae(y, x) compresses targets into discrete latents,
ad(l, x) expands latents back to per-position vocabulary logits in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.random import NoiseSource
from .autodiff.tensor import Tensor, parameter
from .bottleneck import TRAIN, Bottleneck, BottleneckOutput, make_bottleneck
from .data import PAD
from .errors import ConfigError, DimensionError, LengthError
from .nn import (
    Conv1d,
    DecoderLayer,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    ResidualBlock,
    SourceEncoder,
)

BOTTLENECKS = ("gumbel", "semhash", "dvq", "vq")


@dataclass
class ModelConfig:
    # full-scale values in comments
    d_model: int = 64  # 512
    heads: int = 2  # 8
    ffn: int = 128  # 4096
    latent_bits: int = 14  # log2 K: 14 (semhash) / 16 (DVQ)
    bottleneck: str = "semhash"
    n_d: int = 1  # 2 for DVQ
    dvq_variant: str = "sliced"
    compress: int = 3  # c, with C = 2**c = n/m = 8
    encoder_layers: int = 2  # 6
    decoder_layers: int = 1  # 6
    lp_layers: int = 2  # 6
    lp_slices: int = 0  # 0 = smallest split with <= 8 bits per slice
    baseline_layers: int = 2  # 6
    pretrain_steps: int = 1000  # 10000
    vocab_size: int = 0  # filled in from the task (33K subwords)
    max_src_len: int = 64
    max_tgt_len: int = 64
    beta: float = 0.25
    ema_decay: float = 0.999
    squared_commitment: bool = True
    gumbel_temperature: float = 0.5
    gumbel_anneal: bool = False  # linear 1.0 -> 0.2 over training
    length_mode: str = "predict"  # or "oracle"
    seed: int = 0

    @property
    def C(self) -> int:
        return 1 << self.compress

    @property
    def num_codes(self) -> int:
        return 1 << self.latent_bits

    @property
    def max_latents(self) -> int:
        return self.max_tgt_len // self.C

    def resolved_lp_slices(self) -> int:
        if self.lp_slices:
            return self.lp_slices
        for s in range(1, self.latent_bits + 1):
            if self.latent_bits % s == 0 and self.latent_bits // s <= 8:
                return s
        return self.latent_bits

    def validate(self) -> None:
        if self.bottleneck not in BOTTLENECKS:
            raise ConfigError(f"unknown bottleneck {self.bottleneck!r}")
        if self.dvq_variant not in ("sliced", "projected"):
            raise ConfigError(f"unknown DVQ variant {self.dvq_variant!r}")
        if self.latent_bits < 1:
            raise ConfigError("latent_bits must be >= 1")
        if self.bottleneck in ("dvq", "vq") and self.latent_bits % self.n_d:
            raise ConfigError(f"log2 K = {self.latent_bits} not divisible by n_d = {self.n_d}")
        if self.d_model % self.heads:
            raise ConfigError("d_model must be divisible by heads")
        if self.bottleneck in ("dvq", "vq") and self.d_model % self.n_d:
            raise ConfigError("d_model must be divisible by n_d")
        if self.compress < 0:
            raise ConfigError("compress must be >= 0")
        if self.max_tgt_len % self.C:
            raise ConfigError(f"max_tgt_len {self.max_tgt_len} not a multiple of C = {self.C}")
        if self.vocab_size <= 4:
            raise ConfigError("vocab_size must exceed the 4 reserved ids")
        if self.latent_bits % self.resolved_lp_slices():
            raise ConfigError("latent_bits not divisible by lp_slices")
        if self.length_mode not in ("predict", "oracle"):
            raise ConfigError(f"unknown length_mode {self.length_mode!r}")


def pretrain_gate(step: int, config: ModelConfig) -> str:
    """Which stream feeds the final decoder: ``"targets"`` early on, then ``"latents"``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return "targets" if step < config.pretrain_steps else "latents"


def reconstruction_loss(logits, y, pad: int = PAD) -> tuple[Tensor, float]:
    """Cross-entropy over non-pad target positions, and the log-perplexity."""
    loss = ops.cross_entropy(logits, y, ignore_index=pad)
    return loss, loss.item()


def latent_mask(y_mask: np.ndarray, C: int) -> np.ndarray:
    """A latent position is live when any target token it covers is not padding."""
    B, n = y_mask.shape
    return y_mask.reshape(B, n // C, C).any(axis=-1)


class UpStep(Module):
    def __init__(self, dim: int, heads: int, positions: int, rng: np.random.Generator):
        self.pos = Embedding(positions, dim, rng, std=0.1)
        self.block = ResidualBlock(dim, rng)
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.up = Linear(dim, 2 * dim, rng)

    def forward(self, h: Tensor, x_enc: Tensor, x_mask) -> Tensor:
        B, L, D = h.shape
        h = h + self.pos(np.arange(L))
        h = self.block(h)
        h = h + self.attn(self.norm(h), x_enc, mask=x_mask)
        # position-wise D -> 2D, then each row becomes two consecutive rows
        return self.up(h).reshape(B, 2 * L, D)


class AutoEncoder(Module):
    """ae(y, x) and ad(l, x) with their own source encoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        D, H, F = config.d_model, config.heads, config.ffn
        self.src = SourceEncoder(config.vocab_size, config.max_src_len, D, H, F,
                                 config.encoder_layers, rng)
        self.tgt_embed = Embedding(config.vocab_size, D, rng)
        self.tgt_pos = Embedding(config.max_tgt_len, D, rng, std=0.1)
        self.ae_block = ResidualBlock(D, rng)
        self.ae_norm = LayerNorm(D)
        self.ae_attn = MultiHeadAttention(D, H, rng)
        self.down = [Conv1d(2, D, D, rng, stride=2, padding="valid") for _ in range(config.compress)]
        self.bottleneck: Bottleneck = make_bottleneck(
            config.bottleneck, D, config.latent_bits, rng,
            n_slices=config.n_d, projected=config.dvq_variant == "projected",
            decay=config.ema_decay, beta=config.beta, squared=config.squared_commitment,
            temperature=config.gumbel_temperature,
        )
        self.up_steps = [
            UpStep(D, H, config.max_tgt_len >> (config.compress - i), rng)
            for i in range(config.compress)
        ]
        self.dec_start = parameter(rng.normal(0.0, D**-0.5, size=D))
        self.dec_pos = Embedding(config.max_tgt_len, D, rng, std=0.1)
        self.dec_layers = [DecoderLayer(D, H, F, rng) for _ in range(config.decoder_layers)]
        self.dec_norm = LayerNorm(D)
        self.out = Linear(D, config.vocab_size, rng)

    def encode_source(self, x: np.ndarray, x_mask: np.ndarray) -> Tensor:
        return self.src(x, x_mask)

    def embed_targets(self, y: np.ndarray) -> Tensor:
        return self.tgt_embed(y) * math.sqrt(self.config.d_model)

    def ae_forward(
        self,
        y: np.ndarray,
        x_enc: Tensor,
        x_mask: np.ndarray,
        mode: str = TRAIN,
        noise: NoiseSource | None = None,
        y_mask: np.ndarray | None = None,
    ) -> tuple[BottleneckOutput, int]:
        """Targets [B, n] -> bottleneck output over m = n / C latent positions."""
        C = self.config.C
        B, n = y.shape
        if n % C:
            raise LengthError(f"target length {n} is not a multiple of C = {C}")
        if n > self.config.max_tgt_len:
            raise LengthError(f"target length {n} exceeds max_tgt_len {self.config.max_tgt_len}")
        s = self.embed_targets(y) + self.tgt_pos(np.arange(n))
        s = self.ae_block(s)
        s = s + self.ae_attn(self.ae_norm(s), x_enc, mask=x_mask)
        for conv in self.down:
            s = conv(s)
        mask = None if y_mask is None else latent_mask(y_mask, C)
        return self.bottleneck(s, mode=mode, noise=noise, mask=mask), n // C

    def upsample(self, z_q: Tensor, x_enc: Tensor, x_mask: np.ndarray) -> Tensor:
        h = z_q
        for step in self.up_steps:
            h = step(h, x_enc, x_mask)
        return h

    def ad_forward(
        self,
        z_q: Tensor,
        x_enc: Tensor,
        x_mask: np.ndarray,
        targets: np.ndarray | None = None,
    ) -> Tensor:
        """Latents [B, m, D] -> logits [B, m*C, V].

        With ``targets`` the final decoder is teacher-forced on the true targets
        (the pretraining stream) and the upsampled latents are not used.
        Otherwise its inputs are the upsampled latents shifted right behind a
        learned start vector.
        """
        B, m, D = z_q.shape
        n = m * self.config.C
        if targets is not None:
            if targets.shape != (B, n):
                raise DimensionError(f"targets {targets.shape} vs latents expanding to {(B, n)}")
            body = self.embed_targets(targets[:, :-1])
        else:
            u = self.upsample(z_q, x_enc, x_mask)
            if u.shape[1] != n:
                raise DimensionError(f"upsampled length {u.shape[1]} != {n}")
            body = u[:, :-1]
        return self.decode_stream(body, x_enc, x_mask)

    def decode_stream(self, body: Tensor, x_enc: Tensor, x_mask: np.ndarray) -> Tensor:
        """Causal self-attention decoder over [start, body] -> logits."""
        B, _, D = body.shape
        start = ops.reshape(self.dec_start, (1, 1, D)) * np.ones((B, 1, 1))
        h = ops.concat([start, body], axis=1) if body.shape[1] else start
        h = h + self.dec_pos(np.arange(h.shape[1]))
        for layer in self.dec_layers:
            h = layer(h, x_enc, memory_mask=x_mask)
        return self.out(self.dec_norm(h))
