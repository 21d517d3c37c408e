"""Codeword-usage diagnostics, evaluation and the compression/bit-width sweep."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np

from ..autodiff.tensor import no_grad
from ..bottleneck import EVAL, UsageReport, usage_stats, write_histogram_csv
from ..data import batch, token_accuracy
from ..errors import ConfigError
from ..predictor import full_decode
from .config import RunConfig
from .train import EVAL_STREAM, LoadedRun, Trainer, eval_batch

DIAGNOSE_STREAM = EVAL_STREAM - 2


def collect_codes(run: LoadedRun, count: int, batch_size: int = 64) -> list[np.ndarray]:
    """Eval-mode slice indices [N, n_d] of every live latent position, per batch."""
    cfg, model = run.cfg, run.model
    pairs = run.corpus.sample(count, stream=DIAGNOSE_STREAM)
    history = []
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            b = batch(pairs[start : start + batch_size], cfg.model.C, cfg.model.max_tgt_len,
                      cfg.model.max_src_len)
            enc = model.ae.encode_source(b.x, b.x_mask)
            out, _ = model.ae.ae_forward(b.y, enc, b.x_mask, mode=EVAL, y_mask=b.y_mask)
            live = b.y_mask.reshape(len(b), -1, cfg.model.C).any(axis=-1)
            history.append(out.slice_indices[live])
    return history


def run_diagnose(run: LoadedRun, out_dir) -> dict:
    """Usage histogram of the trained bottleneck over held-out data, plus the collapse flag."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bn = run.model.bottleneck
    history = collect_codes(run, run.cfg.diagnose.count)
    report: UsageReport = usage_stats(history, bn.num_codes, bn.n_slices)
    step_bin = run.step // run.cfg.train.usage_bin
    write_histogram_csv(out_dir / "diagnose_usage.csv", [(step_bin, report.counts)])
    threshold = run.cfg.diagnose.collapse_threshold
    result = {
        "step": run.step,
        "bottleneck": bn.kind,
        "n_slices": bn.n_slices,
        "num_codes": bn.num_codes,
        "positions": int(report.counts[0].sum()),
        "usage_fraction": report.fraction,
        "slice_fractions": report.slice_fractions,
        "code_fraction": report.code_fraction,
        "collapse_threshold": threshold,
        "collapsed": report.collapsed(threshold),
    }
    (out_dir / "diagnose.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def run_eval(run: LoadedRun, out_dir, count: int | None = None) -> dict:
    """Reconstruction log-perplexity and full-pipeline token accuracy on held-out pairs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = run.cfg
    count = count or cfg.train.eval_size
    b = eval_batch(run.corpus, cfg, count)
    log_ppl, _ = run.model.eval_reconstruction(b)
    refs = [y for _, y in run.corpus.sample(count, stream=EVAL_STREAM)]
    outs = []
    for start in range(0, count, 64):
        sub = replace(b, x=b.x[start : start + 64], y=b.y[start : start + 64],
                      x_mask=b.x_mask[start : start + 64], y_mask=b.y_mask[start : start + 64])
        lengths = None
        if cfg.model.length_mode == "oracle":
            lengths = sub.y_mask.reshape(len(sub), -1, cfg.model.C).any(axis=-1).sum(axis=1)
        outs.extend(full_decode(run.model.ae, run.model.lp, sub.x, sub.x_mask, lengths))
    result = {"step": run.step, "log_ppl": log_ppl, "accuracy": token_accuracy(outs, refs),
              "count": count}
    (out_dir / "eval.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def sweep_cells(cfg: RunConfig) -> list[tuple[int, int]]:
    ratios = [int(r) for r in cfg.sweep.ratios.split(",") if r.strip()]
    bits = [int(b) for b in cfg.sweep.bits.split(",") if b.strip()]
    return [(r, b) for r in ratios for b in bits]


def cell_config(cfg: RunConfig, ratio: int, bits: int) -> RunConfig:
    c = int(round(math.log2(ratio)))
    if 1 << c != ratio:
        raise ConfigError(f"sweep ratio {ratio} is not a power of two")
    model = replace(cfg.model, compress=c, latent_bits=bits, lp_slices=0)
    train = replace(cfg.train, train_predictor=False, train_baseline=False)
    return replace(cfg, model=model, train=train)


def run_sweep(cfg: RunConfig, out_dir) -> dict:
    """Train one autoencoder per (n/m, bits) cell; report final eval log-perplexity.

    Only the reconstruction path is trained (no latent predictor or baseline),
    with identical budgets and seeds in every cell.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    grid = {}
    for ratio, bits in sweep_cells(cfg):
        cell_dir = out_dir / f"ratio{ratio}_bits{bits}"
        trainer = Trainer(cell_config(cfg, ratio, bits), cell_dir)
        trainer.run()
        log_ppl = trainer.evaluate()
        grid[(ratio, bits)] = log_ppl
    ratios = sorted({r for r, _ in grid})
    bits = sorted({b for _, b in grid})
    with (out_dir / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ratio"] + [f"bits_{b}" for b in bits])
        for r in ratios:
            w.writerow([r] + [repr(grid[(r, b)]) for b in bits])
    result = {
        "cells": [{"ratio": r, "bits": b, "log_ppl": v} for (r, b), v in sorted(grid.items())],
        "monotone_in_ratio": all(
            grid[(r1, b)] <= grid[(r2, b)] for b in bits for r1, r2 in zip(ratios, ratios[1:])
        ),
        "monotone_in_bits": all(
            grid[(r, b2)] <= grid[(r, b1)] for r in ratios for b1, b2 in zip(bits, bits[1:])
        ),
    }
    (out_dir / "sweep.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result

