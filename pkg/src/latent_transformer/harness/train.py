"""Training loop: joint objective, JSONL metrics, usage histograms, checkpoints.

Everything written to the output directory is a function of the config and
seed alone (no wall-clock fields), so identically-seeded runs produce
identical files.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from filelock import FileLock, Timeout

from ..autodiff import Adam, backward
from ..autodiff.random import NoiseSource
from ..bottleneck import write_histogram_csv
from ..data import Corpus, EncodedBatch, Vocab, batch
from ..errors import CheckpointError, ConfigError, NumericError
from ..model import LatentTransformer, StepLosses, gumbel_temperature
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, parse_config_text

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.jsonl"
USAGE_FILE = "usage.csv"
CHECKPOINT_FILE = "checkpoint.bin"
CONFIG_FILE = "config.txt"
LOCK_FILE = "train.lock"
NAN_DUMP_FILE = "nan_dump.json"

EVAL_STREAM = 2**31 - 1
LOSS_KEYS = ("l_r", "l_lp", "aux", "length", "baseline", "loss")


def train_batch(corpus: Corpus, cfg: RunConfig, step: int) -> EncodedBatch:
    """The batch for ``step`` depends only on (task seed, step)."""
    pairs = corpus.sample(cfg.train.batch_size, stream=step)
    return batch(pairs, cfg.model.C, cfg.model.max_tgt_len, cfg.model.max_src_len)


def eval_pairs(corpus: Corpus, count: int, stream: int = EVAL_STREAM):
    return corpus.sample(count, stream=stream)


def eval_batch(corpus: Corpus, cfg: RunConfig, count: int | None = None) -> EncodedBatch:
    pairs = eval_pairs(corpus, count or cfg.train.eval_size)
    return batch(pairs, cfg.model.C, cfg.model.max_tgt_len, cfg.model.max_src_len)


def build_model(cfg: RunConfig) -> LatentTransformer:
    return LatentTransformer(
        cfg.model, with_baseline=cfg.train.train_baseline, with_predictor=cfg.train.train_predictor
    )


def build_corpus(cfg: RunConfig) -> Corpus:
    corpus = Corpus(cfg.task)
    if cfg.model.vocab_size and cfg.model.vocab_size != len(corpus.vocab):
        raise ConfigError(
            f"model.vocab_size {cfg.model.vocab_size} != task vocabulary {len(corpus.vocab)}"
        )
    cfg.model.vocab_size = len(corpus.vocab)
    return corpus


# settings that may change between a run and its resumption
_RESUMABLE = ("train.steps", "train.checkpoint_every")


def _resume_key(config_text: str) -> list[str]:
    return [line for line in config_text.splitlines() if not line.startswith(_RESUMABLE)]


@dataclass
class Window:
    """Accumulators between two metric lines."""

    sums: dict[str, float] = field(default_factory=dict)
    steps: int = 0
    counts: np.ndarray | None = None  # usage [n_d, K'] since the last metric line

    def add(self, losses: StepLosses) -> None:
        for k, v in losses.as_dict().items():
            self.sums[k] = self.sums.get(k, 0.0) + v
        self.steps += 1
        inc = losses.output.usage_counts
        self.counts = inc.copy() if self.counts is None else self.counts + inc

    def means(self) -> dict[str, float]:
        return {k: self.sums.get(k, 0.0) / max(self.steps, 1) for k in LOSS_KEYS}


class Trainer:
    """Owns a model, its optimizer and noise state, and an output directory."""

    def __init__(self, cfg: RunConfig, out_dir, resume: bool = False):
        cfg.validate()
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.corpus = build_corpus(cfg)
        self.model = build_model(cfg)
        self.opt = Adam(
            self.model.trainable(), lr=cfg.train.lr, warmup_steps=cfg.train.warmup_steps,
            clip_norm=cfg.train.clip_norm or None,
        )
        self.noise = NoiseSource(cfg.model.seed)
        self.step = 0
        self.window = Window()
        self.bin_counts: np.ndarray | None = None
        self._eval = eval_batch(self.corpus, cfg)
        self._last_grad_norm = 0.0
        if resume and (self.out / CHECKPOINT_FILE).exists():
            self.restore(load_checkpoint(self.out / CHECKPOINT_FILE))

    # ---------------------------------------------------------------- state

    def capture(self) -> Checkpoint:
        tensors: dict[str, np.ndarray] = {}
        for name, p in self.model.named_parameters():
            tensors[f"param/{name}"] = p.data
        for name, arr in self.model.state_arrays().items():
            tensors[f"state/{name}"] = arr
        for name, arr in self.opt.state_arrays().items():
            tensors[f"adam/{name}"] = arr
        if self.window.counts is not None:
            tensors["usage/window"] = self.window.counts
        if self.bin_counts is not None:
            tensors["usage/bin"] = self.bin_counts
        meta = {
            "step": self.step,
            "adam_t": self.opt.t,
            "noise_seed": self.noise.seed,
            "noise_counters": self.noise.state(),
            "window_sums": self.window.sums,
            "window_steps": self.window.steps,
            "config": self.cfg.to_text(),
            "vocab": self.corpus.vocab.to_json(),
        }
        return Checkpoint(tensors, meta)

    def restore(self, ckpt: Checkpoint) -> None:
        if _resume_key(ckpt.meta.get("config", "")) != _resume_key(self.cfg.to_text()):
            raise CheckpointError("checkpoint was written by a different configuration")
        params = dict(self.model.named_parameters())
        for name, p in params.items():
            key = f"param/{name}"
            if key not in ckpt.tensors or ckpt.tensors[key].shape != p.data.shape:
                raise CheckpointError(f"checkpoint lacks parameter {name} with shape {p.data.shape}")
            p.data[...] = ckpt.tensors[key]
        self.model.load_state_arrays(
            {k[len("state/"):]: v for k, v in ckpt.tensors.items() if k.startswith("state/")}
        )
        self.opt.load_state_arrays(
            {k[len("adam/"):]: v for k, v in ckpt.tensors.items() if k.startswith("adam/")},
            ckpt.meta["adam_t"],
        )
        self.step = int(ckpt.meta["step"])
        self.noise = NoiseSource(ckpt.meta["noise_seed"], ckpt.meta["noise_counters"])
        self.window = Window(
            dict(ckpt.meta["window_sums"]), int(ckpt.meta["window_steps"]),
            ckpt.tensors.get("usage/window", None),
        )
        b = ckpt.tensors.get("usage/bin")
        self.bin_counts = None if b is None else b.astype(np.int64)
        if self.window.counts is not None:
            self.window.counts = self.window.counts.astype(np.int64)

    def save(self) -> Path:
        path = self.out / CHECKPOINT_FILE
        save_checkpoint(path, self.capture())
        return path

    # ---------------------------------------------------------------- steps

    def train_step(self) -> StepLosses:
        cfg = self.cfg
        bottleneck = self.model.bottleneck
        if bottleneck.kind == "gumbel":
            bottleneck.temperature = gumbel_temperature(self.step, cfg.train.steps, cfg.model)
        b = train_batch(self.corpus, cfg, self.step)
        self.opt.zero_grad()
        losses = self.model.losses(b, self.step, self.noise)
        if not math.isfinite(float(losses.total.data)):
            self._dump_nan(losses)
            raise NumericError(f"non-finite loss at step {self.step}")
        backward(losses.total)
        if not math.isfinite(self.opt.grad_norm()):
            self._dump_nan(losses)
            raise NumericError(f"non-finite gradient norm at step {self.step}")
        self._last_grad_norm = self.opt.step()
        self.model.after_step(losses)
        self.step += 1
        self.window.add(losses)
        inc = losses.output.usage_counts
        self.bin_counts = inc.copy() if self.bin_counts is None else self.bin_counts + inc
        return losses

    def _dump_nan(self, losses: StepLosses) -> None:
        params = {}
        for name, p in self.model.named_parameters():
            finite = p.data[np.isfinite(p.data)]
            params[name] = {
                "finite": finite.size == p.data.size,
                "max_abs_finite": float(np.abs(finite).max()) if finite.size else None,
            }
        dump = {
            "step": self.step,
            "losses": {k: (v if math.isfinite(v) else repr(v)) for k, v in losses.as_dict().items()},
            "previous_grad_norm": self._last_grad_norm,
            "lr": self.opt.current_lr(),
            "parameters": params,
        }
        (self.out / NAN_DUMP_FILE).write_text(json.dumps(dump, indent=2, sort_keys=True))

    def evaluate(self) -> float:
        """Eval-mode reconstruction log-perplexity on the fixed held-out batch."""
        return self.model.eval_reconstruction(self._eval)[0]

    def metrics_line(self) -> dict:
        log_ppl = self.evaluate()
        counts = self.window.counts
        if counts is None:
            b = self.model.bottleneck
            counts = np.zeros((b.n_slices, b.slice_size), dtype=np.int64)
        slice_usage = [float(u / counts.shape[1]) for u in (counts > 0).sum(axis=1)]
        return {"step": self.step, **self.window.means(), "log_ppl": log_ppl,
                "usage": slice_usage, "lr": self.opt.current_lr(),
                "grad_norm": self._last_grad_norm}

    def _trim_outputs(self) -> None:
        """Drop metric lines and usage bins written after the current step.

        A fresh run starts from empty files; a resumed one discards whatever
        a crashed predecessor wrote past its last checkpoint.
        """
        metrics, usage = self.out / METRICS_FILE, self.out / USAGE_FILE
        if metrics.exists():
            keep = [ln for ln in metrics.read_text().splitlines(keepends=True)
                    if ln.strip() and json.loads(ln)["step"] <= self.step]
            if keep:
                metrics.write_text("".join(keep))
            else:
                metrics.unlink()
        if usage.exists():
            done_bins = self.step // self.cfg.train.usage_bin
            lines = usage.read_text().splitlines(keepends=True)
            keep = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < done_bins]
            if len(keep) > 1:
                usage.write_text("".join(keep))
            else:
                usage.unlink()

    def run(self, steps: int | None = None, on_metrics: Callable[[dict], None] | None = None) -> dict:
        """Train until ``steps`` total steps (default: the configured budget)."""
        cfg = self.cfg.train
        target = cfg.steps if steps is None else steps
        lock = FileLock(str(self.out / LOCK_FILE))
        try:
            lock.acquire(timeout=0)
        except Timeout:
            raise ConfigError(f"{self.out} is locked by another training process") from None
        try:
            (self.out / CONFIG_FILE).write_text(self.cfg.to_text())
            self._trim_outputs()
            last = None
            while self.step < target:
                self.train_step()
                if self.step % cfg.usage_bin == 0:
                    bin_idx = self.step // cfg.usage_bin - 1
                    write_histogram_csv(self.out / USAGE_FILE, [(bin_idx, self.bin_counts)], append=True)
                    self.bin_counts = None
                if self.step % cfg.eval_every == 0:
                    last = self.metrics_line()
                    with (self.out / METRICS_FILE).open("a") as fh:
                        fh.write(json.dumps(last, sort_keys=True) + "\n")
                    self.window = Window()
                    if on_metrics:
                        on_metrics(last)
                    log.info("step %d l_r %.4f l_lp %.4f log_ppl %.4f", self.step,
                             last["l_r"], last["l_lp"], last["log_ppl"])
                if cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.save()
            self.save()
            return last or {"step": self.step}
        finally:
            lock.release()


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class LoadedRun:
    cfg: RunConfig
    model: LatentTransformer
    vocab: Vocab
    corpus: Corpus
    step: int


def load_run(path, cfg_overrides: RunConfig | None = None) -> LoadedRun:
    """Model and config from a checkpoint file or a training output directory."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_FILE
    ckpt = load_checkpoint(path)
    cfg = parse_config_text(ckpt.meta["config"])
    if cfg_overrides is not None:
        cfg.decode, cfg.diagnose, cfg.sweep = cfg_overrides.decode, cfg_overrides.diagnose, cfg_overrides.sweep
    corpus = build_corpus(cfg)
    model = build_model(cfg)
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in ckpt.tensors:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        p.data[...] = ckpt.tensors[key]
    model.load_state_arrays(
        {k[len("state/"):]: v for k, v in ckpt.tensors.items() if k.startswith("state/")}
    )
    return LoadedRun(cfg, model, Vocab(ckpt.meta["vocab"]), corpus, int(ckpt.meta["step"]))
