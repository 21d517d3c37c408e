"""Decoding, step-count instrumentation and latency measurement."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..autodiff.tensor import no_grad
from ..data import PAD, Vocab, strip_output, token_accuracy
from ..errors import ConfigError
from ..predictor import (
    DecodeStats,
    baseline_decode,
    decode_latents,
    full_decode,
    npd_rescore,
    pad_codes,
    reconstruct,
)
from .train import EVAL_STREAM, LoadedRun

# GPU per-sentence latencies at production scale (n/m = 8, D = 512), for context only
REFERENCE_LATENCY_MS = {
    "baseline_b1": 408,
    "lt_semhash_b1": 105,
    "lt_semhash_b64": 8,
}

DECODE_STREAM = EVAL_STREAM - 1


def pad_sources(sources: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    if not sources:
        raise ValueError("no sources to decode")
    k = max(len(s) for s in sources)
    x = np.full((len(sources), k), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        if not len(s):
            raise ValueError(f"source {i} is empty")
        x[i, : len(s)] = s
    return x, x != PAD


def read_lines(path, vocab: Vocab) -> list[list[int]]:
    with Path(path).open(encoding="utf-8") as fh:
        return [vocab.encode(line.split()) for line in fh if line.strip()]


@dataclass
class DecodeResult:
    outputs: list[list[int]]
    stats: DecodeStats
    chosen: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)


def latent_lengths(run: LoadedRun, refs, fixed_length: int, count: int):
    """Latents per sentence: fixed, oracle (from references) or None (predict)."""
    C = run.cfg.model.C
    if fixed_length:
        return np.full(count, math.ceil(fixed_length / C), dtype=np.int64)
    if run.cfg.model.length_mode == "oracle":
        if refs is None:
            raise ConfigError("oracle length mode needs references")
        return np.array([math.ceil((len(r) + 1) / C) for r in refs], dtype=np.int64)
    return None


def decode_batch(
    run: LoadedRun,
    sources: Sequence[Sequence[int]],
    refs=None,
    mode: str = "greedy",
    k: int = 1,
    temperature: float = 1.0,
    seed: int = 0,
    fixed_length: int = 0,
) -> DecodeResult:
    """Decode one batch of sources with the latent pipeline."""
    model = run.model
    x, xm = pad_sources(sources)
    lengths = latent_lengths(run, refs, fixed_length, len(sources))
    stats = DecodeStats()
    if mode == "greedy" or k == 1:
        outs = full_decode(model.ae, model.lp, x, xm, lengths, stats)
        return DecodeResult(outs, stats)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDEC]))
    with no_grad():
        lp_enc = model.lp.encode_source(x, xm)
        if lengths is None:
            lengths = model.lp.predict_length(lp_enc, xm)
        before = model.lp.calls
        cands = decode_latents(model.lp, lp_enc, xm, lengths, mode, k, temperature, rng)
        stats.lp_steps += model.lp.calls - before
    if model.baseline is None:
        # no scorer: keep the candidate the latent model likes best
        best = [int(np.argmax([c.score for c in row])) for row in cands]
        chosen = [[row[b]] for row, b in zip(cands, best)]
        outs = full_decode_from(run, x, xm, chosen, stats)
        return DecodeResult(outs, stats, best, [row[b].score for row, b in zip(cands, best)])
    outs, best, scores = npd_rescore(model.ae, model.baseline, x, xm, cands)
    stats.ad_passes += 1
    return DecodeResult(outs, stats, best, [float(scores[i, b]) for i, b in enumerate(best)])


def full_decode_from(run: LoadedRun, x, xm, candidates, stats: DecodeStats) -> list[list[int]]:
    with no_grad():
        enc = run.model.ae.encode_source(x, xm)
        tokens = reconstruct(run.model.ae, enc, xm, pad_codes([c[0] for c in candidates]))
    stats.ad_passes += 1
    return [strip_output(row) for row in tokens]


def decode_all(run: LoadedRun, sources, refs=None, batch_size: int | None = None, seed: int = 0,
               fixed_length: int = 0) -> tuple[list[list[int]], list[dict]]:
    d = run.cfg.decode
    bs = batch_size or d.batch_size
    outs, records = [], []
    for start in range(0, len(sources), bs):
        src = sources[start : start + bs]
        ref = None if refs is None else refs[start : start + bs]
        res = decode_batch(run, src, ref, d.mode, d.k, d.temperature, seed + start, fixed_length)
        for i, o in enumerate(res.outputs):
            rec = {
                "index": start + i,
                "output": o,
                "lp_steps": res.stats.lp_steps,
                "ad_passes": res.stats.ad_passes,
            }
            if res.chosen:
                rec["candidate"] = res.chosen[i]
                rec["score"] = res.scores[i]
            records.append(rec)
        outs.extend(res.outputs)
    return outs, records


def time_per_sentence(fn, sources, batch_size: int, repeats: int = 1) -> float:
    """Mean wall-clock seconds per sentence, decoding in chunks of ``batch_size``."""
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        for start in range(0, len(sources), batch_size):
            fn(sources[start : start + batch_size])
        best = min(best, time.perf_counter() - t0)
    return best / len(sources)


def timing_report(run: LoadedRun, sources, fixed_length: int, batch_sizes=(1, 64),
                  repeats: int = 1) -> dict:
    """Per-sentence latency of the latent pipeline and the token-level baseline.

    With ``fixed_length`` every sentence is decoded to exactly that many
    target tokens, so both systems do the same amount of work per sentence.
    """
    model = run.model
    out = {}

    def lt(src):
        x, xm = pad_sources(src)
        lengths = latent_lengths(run, None, fixed_length, len(src))
        full_decode(model.ae, model.lp, x, xm, lengths)

    for b in batch_sizes:
        out[f"lt_b{b}_s"] = time_per_sentence(lt, sources, b, repeats)
    if model.baseline is not None:
        def base(src):
            x, xm = pad_sources(src)
            baseline_decode(model.baseline, x, xm, length=fixed_length or None)

        for b in batch_sizes:
            out[f"baseline_b{b}_s"] = time_per_sentence(base, sources, b, repeats)
        out["speedup_b1"] = out["baseline_b1_s"] / out["lt_b1_s"]
    return out


def step_counts(run: LoadedRun, source: Sequence[int], fixed_length: int) -> dict:
    """Sequential network invocations to produce one sentence of ``fixed_length`` tokens."""
    model = run.model
    x, xm = pad_sources([source])
    stats = DecodeStats()
    lengths = latent_lengths(run, None, fixed_length, 1)
    full_decode(model.ae, model.lp, x, xm, lengths, stats)
    out = {"lt_lp_steps": stats.lp_steps, "lt_ad_passes": stats.ad_passes,
           "lt_sequential": stats.sequential}
    if model.baseline is not None:
        bstats = DecodeStats()
        baseline_decode(model.baseline, x, xm, length=fixed_length, stats=bstats)
        out["baseline_sequential"] = bstats.baseline_steps
    return out


def run_decode(run: LoadedRun, out_dir, seed: int = 0) -> dict:
    d = run.cfg.decode
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    refs = None
    if d.input:
        if d.accuracy and not d.references:
            raise ConfigError("accuracy requested but decode.references is not set")
        sources = read_lines(d.input, run.vocab)
        if d.references:
            refs = read_lines(d.references, run.vocab)
            if len(refs) != len(sources):
                raise ConfigError("references and inputs differ in line count")
    else:
        pairs = run.corpus.sample(d.count, stream=DECODE_STREAM)
        sources = [x for x, _ in pairs]
        refs = [y for _, y in pairs]
    outs, records = decode_all(run, sources, refs, seed=seed, fixed_length=d.fixed_length)
    with (out_dir / "outputs.txt").open("w", encoding="utf-8") as fh:
        for o in outs:
            fh.write(" ".join(run.vocab.decode(o)) + "\n")
    with (out_dir / "decode.jsonl").open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    n_tokens = fixed_length_or_max(d.fixed_length, run)
    report = {
        "reference_latency_ms": REFERENCE_LATENCY_MS,
        "mode": d.mode,
        "count": len(sources),
        "batch_size": d.batch_size,
        "step_counts": step_counts(run, sources[0], n_tokens),
        "step_count_tokens": n_tokens,
    }
    if refs is not None:
        report["accuracy"] = token_accuracy(outs, refs)
    if d.timing:
        report["timing"] = timing_report(run, sources, d.fixed_length or n_tokens)
    (out_dir / "decode_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def fixed_length_or_max(fixed_length: int, run: LoadedRun) -> int:
    return fixed_length or run.cfg.model.max_tgt_len
