"""The full Latent Transformer: autoencoder, latent predictor and the optional
token-level baseline, trained jointly on one objective per step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff.random import NoiseSource
from .autodiff.tensor import Tensor, no_grad
from .autoencoder import AutoEncoder, ModelConfig, latent_mask, pretrain_gate, reconstruction_loss
from .bottleneck import EVAL, TRAIN, BottleneckOutput
from .data import EncodedBatch
from .nn import Module
from .predictor import ArBaseline, LatentPredictor, check_compatible


@dataclass
class StepLosses:
    total: Tensor
    l_r: float
    l_lp: float
    aux: float
    length: float
    baseline: float
    output: BottleneckOutput
    latent_mask: np.ndarray

    def as_dict(self) -> dict[str, float]:
        return {
            "l_r": self.l_r,
            "l_lp": self.l_lp,
            "aux": self.aux,
            "length": self.length,
            "baseline": self.baseline,
            "loss": float(self.total.data),
        }


def gumbel_temperature(step: int, total_steps: int, config: ModelConfig) -> float:
    """Fixed temperature, or a linear 1.0 -> 0.2 anneal over the run."""
    if not config.gumbel_anneal:
        return config.gumbel_temperature
    frac = min(max(step / max(total_steps, 1), 0.0), 1.0)
    return 1.0 - 0.8 * frac


class LatentTransformer(Module):
    def __init__(self, config: ModelConfig, with_baseline: bool = True, with_predictor: bool = True):
        config.validate()
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1A7]))
        self.ae = AutoEncoder(config, rng)
        self.lp = LatentPredictor(config, rng)
        self.baseline = ArBaseline(config, rng) if with_baseline else None
        check_compatible(self.lp, self.ae)
        self.with_predictor = with_predictor

    def trainable(self) -> dict:
        """Parameters that receive gradients under the active objective."""
        params = {f"ae.{k}": v for k, v in self.ae.named_parameters()}
        if self.with_predictor:
            params.update({f"lp.{k}": v for k, v in self.lp.named_parameters()})
        if self.baseline is not None:
            params.update({f"baseline.{k}": v for k, v in self.baseline.named_parameters()})
        return params

    @property
    def bottleneck(self):
        return self.ae.bottleneck

    def losses(
        self,
        batch: EncodedBatch,
        step: int,
        noise: NoiseSource | None = None,
        mode: str = TRAIN,
    ) -> StepLosses:
        """Joint objective l_r + l_lp, plus the bottleneck's auxiliary term and the
        separately-parameterized length and baseline losses.

        The latent predictor sees the bottleneck codes as plain integers, so
        its loss sends no gradient into the autoencoder.
        """
        x, y, xm, ym = batch.x, batch.y, batch.x_mask, batch.y_mask
        x_enc = self.ae.encode_source(x, xm)
        out, m = self.ae.ae_forward(y, x_enc, xm, mode=mode, noise=noise, y_mask=ym)
        lmask = latent_mask(ym, self.config.C)
        targets = y if pretrain_gate(step, self.config) == "targets" else None
        logits = self.ae.ad_forward(out.z_q, x_enc, xm, targets=targets)
        l_r, _ = reconstruction_loss(logits, y)

        total = l_r + out.aux_loss
        l_lp = length = baseline = 0.0
        if self.with_predictor:
            lp_enc = self.lp.encode_source(x, xm)
            lp_loss = self.lp.loss(lp_enc, xm, out.z_d, lmask)
            total = total + lp_loss
            l_lp = lp_loss.item()
        if self.with_predictor and self.config.length_mode == "predict":
            l_len = self.lp.length_loss(lp_enc, xm, lmask.sum(axis=1))
            total = total + l_len
            length = l_len.item()
        if self.baseline is not None:
            l_b = self.baseline.loss(self.baseline.encode_source(x, xm), xm, y)
            total = total + l_b
            baseline = l_b.item()
        return StepLosses(total, l_r.item(), l_lp, out.aux_loss.item(),
                          length, baseline, out, lmask)

    def after_step(self, losses: StepLosses) -> None:
        self.ae.bottleneck.after_step(losses.output, losses.latent_mask)

    def eval_reconstruction(self, batch: EncodedBatch) -> tuple[float, BottleneckOutput]:
        """Eval-mode log-perplexity of ad(ae(y, x), x), always through the latents."""
        with no_grad():
            x_enc = self.ae.encode_source(batch.x, batch.x_mask)
            out, _ = self.ae.ae_forward(batch.y, x_enc, batch.x_mask, mode=EVAL, y_mask=batch.y_mask)
            logits = self.ae.ad_forward(out.z_q, x_enc, batch.x_mask)
            _, log_ppl = reconstruction_loss(logits, batch.y)
        return log_ppl, out

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"bottleneck/{k}": v for k, v in self.ae.bottleneck.state_arrays().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        prefix = "bottleneck/"
        self.ae.bottleneck.load_state_arrays(
            {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        )
