"""Autoregressive latent prediction lp(x), the token-level baseline, and decoding.

The fast path generates m = n / C latents one at a time and then reconstructs
all n output tokens in a single parallel ad pass. Each per-position code is
predicted as a chain of bit-group slices so softmax width stays small for
large K.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, no_grad, parameter
from .autoencoder import AutoEncoder, ModelConfig
from .bottleneck import compose_codes, decompose_codes
from .data import BOS, EOS, PAD, strip_output
from .errors import ConfigError
from .nn import DecoderLayer, Embedding, FeedForward, LayerNorm, Linear, Module, SourceEncoder


@dataclass
class LatentSequence:
    codes: list[int]
    log_probs: list[float] = field(default_factory=list)

    @property
    def score(self) -> float:
        return float(sum(self.log_probs))

    def __len__(self) -> int:
        return len(self.codes)


@dataclass
class DecodeStats:
    lp_steps: int = 0
    ad_passes: int = 0
    baseline_steps: int = 0

    @property
    def sequential(self) -> int:
        return self.lp_steps + self.ad_passes


def _masked_mean_rows(h: Tensor, mask: np.ndarray) -> Tensor:
    w = np.asarray(mask, dtype=np.float64)[..., None]
    return ops.sum(h * w, axis=1) * (1.0 / np.maximum(w.sum(axis=1), 1.0))


class LatentPredictor(Module):
    """lp(x): causal transformer over the latent prefix attending to its own source encoding."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        D, H, F = config.d_model, config.heads, config.ffn
        self.n_slices = config.resolved_lp_slices()
        self.slice_bits = config.latent_bits // self.n_slices
        Ks = 1 << self.slice_bits
        self.src = SourceEncoder(config.vocab_size, config.max_src_len, D, H, F,
                                 config.encoder_layers, rng)
        self.start = parameter(rng.normal(0.0, D**-0.5, size=D))
        self.code_embed = [Embedding(Ks, D, rng) for _ in range(self.n_slices)]
        self.pos = Embedding(config.max_latents + 1, D, rng, std=0.1)
        self.layers = [DecoderLayer(D, H, F, rng) for _ in range(config.lp_layers)]
        self.norm = LayerNorm(D)
        self.cond_embed = [Embedding(Ks, D, rng) for _ in range(self.n_slices - 1)]
        self.slice_norms = [LayerNorm(D) for _ in range(self.n_slices)]
        self.slice_ff = [FeedForward(D, F, rng) for _ in range(self.n_slices)]
        self.heads = [Linear(D, Ks, rng) for _ in range(self.n_slices)]
        self.length_embed = Embedding(config.max_src_len + 1, D, rng)
        self.length_head = Linear(D, config.max_latents, rng)
        self.calls = 0

    @property
    def slice_size(self) -> int:
        return 1 << self.slice_bits

    def split(self, codes) -> np.ndarray:
        return decompose_codes(codes, self.n_slices, self.slice_size)

    def join(self, slices) -> np.ndarray:
        return compose_codes(slices, self.slice_size)

    def encode_source(self, x, x_mask) -> Tensor:
        return self.src(x, x_mask)

    def hidden(self, x_enc: Tensor, x_mask, prefix: np.ndarray) -> Tensor:
        """States [B, t+1, D]; row j predicts latent j given latents < j."""
        B, t = prefix.shape
        if t + 1 > self.config.max_latents + 1:
            raise ValueError(f"latent prefix of length {t} exceeds {self.config.max_latents}")
        D = self.config.d_model
        h = ops.reshape(self.start, (1, 1, D)) * np.ones((B, 1, 1))
        if t:
            sl = self.split(prefix)
            emb = self.code_embed[0](sl[..., 0])
            for s in range(1, self.n_slices):
                emb = emb + self.code_embed[s](sl[..., s])
            h = ops.concat([h, emb * math.sqrt(D)], axis=1)
        h = h + self.pos(np.arange(t + 1))
        for layer in self.layers:
            h = layer(h, x_enc, memory_mask=x_mask)
        return self.norm(h)

    def slice_logits(self, h: Tensor, prev_slices: np.ndarray, s: int) -> Tensor:
        z = h
        for j in range(s):
            z = z + self.cond_embed[j](prev_slices[..., j])
        z = z + self.slice_ff[s](self.slice_norms[s](z))
        return self.heads[s](z)

    def forward(self, x_enc: Tensor, x_mask, prefix: np.ndarray) -> list[Tensor]:
        """Next-latent distribution after ``prefix``, as per-slice probabilities.

        With more than one slice, slice s is conditioned on the greedy choice of
        the earlier slices; use :meth:`code_log_probs` for a full distribution.
        """
        self.calls += 1
        h = self.hidden(x_enc, x_mask, prefix)[:, -1]
        chosen = np.zeros((h.shape[0], self.n_slices), dtype=np.int64)
        out = []
        for s in range(self.n_slices):
            p = ops.softmax(self.slice_logits(h, chosen, s), axis=-1)
            chosen[:, s] = np.argmax(p.data, axis=-1)
            out.append(p)
        return out

    def code_log_probs(self, x_enc: Tensor, x_mask, prefix: np.ndarray) -> np.ndarray:
        """Full log-distribution [B, K] over the next code (small K only)."""
        with no_grad():
            h = self.hidden(x_enc, x_mask, prefix)[:, -1].data
            K = 1 << self.config.latent_bits
            all_slices = self.split(np.arange(K))
            B = h.shape[0]
            total = np.zeros((B, K))
            for s in range(self.n_slices):
                hs = Tensor(np.repeat(h[:, None, :], K, axis=1))
                prev = np.broadcast_to(all_slices, (B, K, self.n_slices))
                lp = ops.log_softmax(self.slice_logits(hs, prev, s), axis=-1).data
                total += np.take_along_axis(lp, prev[..., s : s + 1], axis=-1)[..., 0]
        return total

    def loss(self, x_enc: Tensor, x_mask, codes: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Mean over latent positions of -log p(code) under teacher forcing.

        ``codes`` are plain integers: no gradient reaches whatever produced them.
        """
        codes = np.asarray(codes, dtype=np.int64)
        h = self.hidden(x_enc, x_mask, codes[:, :-1])
        sl = self.split(codes)
        total = None
        for s in range(self.n_slices):
            target = sl[..., s]
            if mask is not None:
                target = np.where(mask, target, -1)
            ce = ops.cross_entropy(self.slice_logits(h, sl, s), target, ignore_index=-1)
            total = ce if total is None else total + ce
        return total

    def length_logits(self, x_enc: Tensor, x_mask) -> Tensor:
        """Length buckets from the pooled source encoding plus the source length itself."""
        src_len = np.asarray(x_mask).sum(axis=1)
        return self.length_head(_masked_mean_rows(x_enc, x_mask) + self.length_embed(src_len))

    def length_loss(self, x_enc: Tensor, x_mask, num_latents: np.ndarray) -> Tensor:
        target = np.clip(np.asarray(num_latents) - 1, 0, self.config.max_latents - 1)
        return ops.cross_entropy(self.length_logits(x_enc, x_mask), target)

    def predict_length(self, x_enc: Tensor, x_mask) -> np.ndarray:
        with no_grad():
            return np.argmax(self.length_logits(x_enc, x_mask).data, axis=-1) + 1

    def decode(
        self,
        x_enc: Tensor,
        x_mask,
        m: int,
        mode: str = "greedy",
        k: int = 1,
        temperature: float = 1.0,
        rng: np.random.Generator | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Generate ``k`` latent sequences of length ``m`` per source row.

        Returns codes [B, k, m] and per-position log-probabilities [B, k, m].
        ``topk`` keeps candidate 0 greedy and samples the rest from each
        slice's ``k`` most likely values; ``sample`` draws all ``k`` at
        ``temperature``.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        if mode not in ("greedy", "sample", "topk"):
            raise ValueError(f"unknown decode mode {mode!r}")
        if mode == "greedy":
            k = 1
        if mode != "greedy" and rng is None:
            rng = np.random.default_rng(0)
        B = x_enc.shape[0]
        R = B * k
        with no_grad():
            enc = Tensor(np.repeat(x_enc.data, k, axis=0))
            msk = np.repeat(np.asarray(x_mask), k, axis=0)
            codes = np.zeros((R, 0), dtype=np.int64)
            logp = np.zeros((R, m))
            greedy_row = np.zeros(R, dtype=bool)
            if mode == "topk":
                greedy_row[::k] = True
            for t in range(m):
                self.calls += 1
                h = self.hidden(enc, msk, codes)[:, -1]
                chosen = np.zeros((R, self.n_slices), dtype=np.int64)
                for s in range(self.n_slices):
                    lg = ops.log_softmax(self.slice_logits(h, chosen, s), axis=-1).data
                    pick = self._choose(lg, mode, k, temperature, rng, greedy_row)
                    chosen[:, s] = pick
                    logp[:, t] += lg[np.arange(R), pick]
                codes = np.concatenate([codes, self.join(chosen)[:, None]], axis=1)
        return codes.reshape(B, k, m), logp.reshape(B, k, m)

    @staticmethod
    def _choose(logp, mode, k, temperature, rng, greedy_row) -> np.ndarray:
        best = np.argmax(logp, axis=-1)
        if mode == "greedy":
            return best
        z = logp / max(temperature, 1e-8) if mode == "sample" else logp.copy()
        if mode == "topk" and k < z.shape[-1]:
            kth = np.sort(z, axis=-1)[:, -k][:, None]
            z = np.where(z >= kth, z, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        u = rng.random((p.shape[0], 1))
        drawn = np.minimum((np.cumsum(p, axis=-1) < u).sum(axis=-1), p.shape[-1] - 1)
        return np.where(greedy_row, best, drawn)


class ArBaseline(Module):
    """Token-level autoregressive encoder-decoder used for latency comparison and rescoring."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        D, H, F = config.d_model, config.heads, config.ffn
        self.src = SourceEncoder(config.vocab_size, config.max_src_len, D, H, F,
                                 config.encoder_layers, rng)
        self.embed = Embedding(config.vocab_size, D, rng)
        self.pos = Embedding(config.max_tgt_len, D, rng, std=0.1)
        self.layers = [DecoderLayer(D, H, F, rng) for _ in range(config.baseline_layers)]
        self.norm = LayerNorm(D)
        self.out = Linear(D, config.vocab_size, rng)
        self.calls = 0

    def encode_source(self, x, x_mask) -> Tensor:
        return self.src(x, x_mask)

    def logits(self, x_enc: Tensor, x_mask, prefix: np.ndarray) -> Tensor:
        """Logits [B, t, V] for inputs [bos, prefix[:-1]]... i.e. row j predicts token j."""
        B, t = prefix.shape
        inp = np.concatenate([np.full((B, 1), BOS, dtype=np.int64), prefix[:, : t - 1]], axis=1)
        h = self.embed(inp) * math.sqrt(self.config.d_model) + self.pos(np.arange(t))
        for layer in self.layers:
            h = layer(h, x_enc, memory_mask=x_mask)
        return self.out(self.norm(h))

    def loss(self, x_enc: Tensor, x_mask, y: np.ndarray) -> Tensor:
        return ops.cross_entropy(self.logits(x_enc, x_mask, y), y, ignore_index=PAD)

    def greedy(self, x_enc: Tensor, x_mask, length: int | None = None,
               max_len: int | None = None) -> np.ndarray:
        """Greedy decode; exactly ``length`` steps when given, else until all rows emit eos."""
        B = x_enc.shape[0]
        steps = length if length is not None else (max_len or self.config.max_tgt_len)
        out = np.zeros((B, 0), dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        with no_grad():
            for _ in range(steps):
                self.calls += 1
                probe = np.concatenate([out, np.zeros((B, 1), dtype=np.int64)], axis=1)
                nxt = np.argmax(self.logits(x_enc, x_mask, probe).data[:, -1], axis=-1)
                nxt = np.where(done, PAD, nxt)
                out = np.concatenate([out, nxt[:, None]], axis=1)
                done |= nxt == EOS
                if length is None and done.all():
                    break
        return out

    def score(self, x_enc: Tensor, x_mask, outputs: list[list[int]]) -> np.ndarray:
        """Teacher-forced log-likelihood of each output (+ eos) given its source row."""
        B = len(outputs)
        n = max(len(o) for o in outputs) + 1
        y = np.full((B, n), PAD, dtype=np.int64)
        for i, o in enumerate(outputs):
            y[i, : len(o)] = o
            y[i, len(o)] = EOS
        with no_grad():
            lp = ops.log_softmax(self.logits(x_enc, x_mask, y), axis=-1).data
        tok = np.take_along_axis(lp, y[..., None], axis=-1)[..., 0]
        return (tok * (y != PAD)).sum(axis=1)


def decode_latents(
    lp: LatentPredictor,
    x_enc: Tensor,
    x_mask,
    lengths,
    mode: str = "greedy",
    k: int = 1,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
) -> list[list[LatentSequence]]:
    """Candidate latent sequences per source row (1 for greedy, ``k`` otherwise)."""
    lengths = np.broadcast_to(np.asarray(lengths, dtype=np.int64), (x_enc.shape[0],))
    m = int(lengths.max())
    codes, logp = lp.decode(x_enc, x_mask, m, mode, k, temperature, rng)
    out = []
    for b in range(codes.shape[0]):
        mb = int(lengths[b])
        out.append([
            LatentSequence(codes[b, j, :mb].tolist(), logp[b, j, :mb].tolist())
            for j in range(codes.shape[1])
        ])
    return out


def reconstruct(ae: AutoEncoder, x_enc: Tensor, x_mask, codes: np.ndarray) -> np.ndarray:
    """One parallel ad pass from integer codes [B, m] to token ids [B, m*C]."""
    with no_grad():
        z_q = ae.bottleneck.embed_codes(codes)
        logits = ae.ad_forward(z_q, x_enc, x_mask)
    return np.argmax(logits.data, axis=-1)


def pad_codes(seqs: list[LatentSequence]) -> np.ndarray:
    m = max(len(s) for s in seqs)
    arr = np.zeros((len(seqs), m), dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s.codes
        if len(s) < m and len(s):
            arr[i, len(s):] = s.codes[-1]
    return arr


def full_decode(
    ae: AutoEncoder,
    lp: LatentPredictor,
    x: np.ndarray,
    x_mask: np.ndarray,
    lengths=None,
    stats: DecodeStats | None = None,
) -> list[list[int]]:
    """Greedy latents, then one parallel reconstruction; outputs stripped at eos.

    ``lengths`` gives the number of latents per row (oracle); when omitted the
    length head predicts it.
    """
    stats = stats if stats is not None else DecodeStats()
    with no_grad():
        lp_enc = lp.encode_source(x, x_mask)
        if lengths is None:
            lengths = lp.predict_length(lp_enc, x_mask)
        before = lp.calls
        cands = decode_latents(lp, lp_enc, x_mask, lengths, "greedy")
        stats.lp_steps += lp.calls - before
        ad_enc = ae.encode_source(x, x_mask)
        tokens = reconstruct(ae, ad_enc, x_mask, pad_codes([c[0] for c in cands]))
        stats.ad_passes += 1
    return [strip_output(row) for row in tokens]


def npd_rescore(
    ae: AutoEncoder,
    baseline: ArBaseline,
    x: np.ndarray,
    x_mask: np.ndarray,
    candidates: list[list[LatentSequence]],
) -> tuple[list[list[int]], list[int], np.ndarray]:
    """Decode every candidate in one batch, keep the one the baseline scores highest.

    Returns (best outputs, chosen candidate index, scores [B, k]). Ties keep
    the lowest index.
    """
    if not candidates or any(len(c) == 0 for c in candidates):
        raise ValueError("npd_rescore needs at least one candidate per source")
    k = max(len(c) for c in candidates)
    B = len(candidates)
    flat = [c[min(j, len(c) - 1)] for c in candidates for j in range(k)]
    xr = np.repeat(x, k, axis=0)
    mr = np.repeat(x_mask, k, axis=0)
    with no_grad():
        ad_enc = ae.encode_source(xr, mr)
        tokens = reconstruct(ae, ad_enc, mr, pad_codes(flat))
        outs = [strip_output(row) for row in tokens]
        base_enc = baseline.encode_source(xr, mr)
        scores = baseline.score(base_enc, mr, outs).reshape(B, k)
    for b, c in enumerate(candidates):
        scores[b, len(c):] = -np.inf
    best = np.argmax(scores, axis=1)
    return [outs[b * k + int(best[b])] for b in range(B)], best.tolist(), scores


def baseline_decode(
    baseline: ArBaseline,
    x: np.ndarray,
    x_mask: np.ndarray,
    length: int | None = None,
    stats: DecodeStats | None = None,
) -> list[list[int]]:
    stats = stats if stats is not None else DecodeStats()
    with no_grad():
        enc = baseline.encode_source(x, x_mask)
        before = baseline.calls
        out = baseline.greedy(enc, x_mask, length=length)
        stats.baseline_steps += baseline.calls - before
    return [strip_output(row) for row in out]


def check_compatible(lp: LatentPredictor, ae: AutoEncoder) -> None:
    if lp.config.latent_bits != ae.bottleneck.code_bits:
        raise ConfigError(
            f"latent predictor covers {1 << lp.config.latent_bits} codes, "
            f"bottleneck has {ae.bottleneck.num_codes}"
        )
