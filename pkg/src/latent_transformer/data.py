"""Synthetic sequence tasks, TSV corpora, vocabularies and batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, LengthError, ParseError

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")
TASK_KINDS = ("copy", "reverse", "cipher", "file")

Pair = tuple[list[int], list[int]]


class Vocab:
    """Bijective token <-> id map with ids 0..3 reserved for pad/bos/eos/unk."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:4]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @classmethod
    def synthetic(cls, size: int) -> "Vocab":
        """Tokens are the decimal strings of their own ids."""
        if size <= len(RESERVED):
            raise ConfigError(f"vocab size {size} leaves no room for symbols")
        return cls(list(RESERVED) + [str(i) for i in range(len(RESERVED), size)])

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], min_freq: int = 1) -> "Vocab":
        freq = Counter(t for seq in sequences for t in seq)
        kept = sorted((t for t, c in freq.items() if c >= min_freq), key=lambda t: (-freq[t], t))
        return cls(list(RESERVED) + kept)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.index.get(t, UNK) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Tokens up to (not including) the first eos; pads dropped."""
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i != PAD:
                out.append(self.tokens[i])
        return out

    def to_json(self) -> list[str]:
        return list(self.tokens)


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 32
    min_len: int = 8
    max_len: int = 48
    seed: int = 0
    path: str = ""
    min_freq: int = 1

    def validate(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("file task needs a path")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"bad length range [{self.min_len}, {self.max_len}]")


def cipher_permutation(vocab_size: int, seed: int) -> np.ndarray:
    """Seeded permutation of the symbol ids (reserved ids map to themselves)."""
    n = vocab_size - len(RESERVED)
    if n < 2:
        raise ConfigError(f"vocab size {vocab_size} too small for a permutation")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC1F]))
    perm = np.arange(vocab_size)
    perm[len(RESERVED):] = len(RESERVED) + rng.permutation(n)
    return perm


def transform(kind: str, x: Sequence[int], permutation: np.ndarray | None = None) -> list[int]:
    if kind == "copy":
        return list(x)
    if kind == "reverse":
        return list(reversed(x))
    if kind == "cipher":
        return [int(permutation[t]) for t in x]
    raise ConfigError(f"no synthetic transform for {kind!r}")


def generate(
    task: TaskSpec,
    count: int,
    stream: int = 0,
    permutation: np.ndarray | None = None,
) -> list[Pair]:
    """``count`` synthetic (x, y) pairs; deterministic in (task.seed, stream)."""
    task.validate()
    if task.kind == "file":
        raise ConfigError("file tasks are sampled through Corpus, not generate()")
    if task.kind == "cipher" and permutation is None:
        permutation = cipher_permutation(task.vocab_size, task.seed)
    if task.vocab_size <= len(RESERVED):
        raise ConfigError(f"vocab size {task.vocab_size} too small")
    rng = np.random.default_rng(np.random.SeedSequence([task.seed, 0x6E4, stream]))
    lengths = rng.integers(task.min_len, task.max_len + 1, size=count)
    pairs = []
    for n in lengths:
        x = rng.integers(len(RESERVED), task.vocab_size, size=int(n)).tolist()
        pairs.append((x, transform(task.kind, x, permutation)))
    return pairs


def load_tsv(path) -> list[tuple[list[str], list[str]]]:
    """One ``source<TAB>target`` pair per line, whitespace-tokenized."""
    pairs = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected exactly one tab, found {len(parts) - 1}", lineno)
            pairs.append((parts[0].split(), parts[1].split()))
    return pairs


class Corpus:
    """Source of training pairs for any task kind, with its vocabulary."""

    def __init__(self, task: TaskSpec):
        task.validate()
        self.task = task
        self.permutation = None
        self.pairs: list[Pair] = []
        if task.kind == "file":
            raw = load_tsv(task.path)
            self.vocab = Vocab.build((s for pair in raw for s in pair), task.min_freq)
            self.pairs = [(self.vocab.encode(x), self.vocab.encode(y)) for x, y in raw]
            if not self.pairs:
                raise ConfigError(f"corpus {task.path} is empty")
        else:
            self.vocab = Vocab.synthetic(task.vocab_size)
            if task.kind == "cipher":
                self.permutation = cipher_permutation(task.vocab_size, task.seed)

    def sample(self, count: int, stream: int) -> list[Pair]:
        if self.task.kind != "file":
            return generate(self.task, count, stream, self.permutation)
        rng = np.random.default_rng(np.random.SeedSequence([self.task.seed, 0xF17E, stream]))
        return [self.pairs[i] for i in rng.integers(0, len(self.pairs), size=count)]

    def reference(self, x: Sequence[int]) -> list[int]:
        return transform(self.task.kind, x, self.permutation)


@dataclass
class EncodedBatch:
    x: np.ndarray  # [b, k] source ids, pad-filled
    y: np.ndarray  # [b, n] target ids + eos, padded to a multiple of C
    x_mask: np.ndarray
    y_mask: np.ndarray

    def __len__(self) -> int:
        return self.x.shape[0]


def round_up(n: int, multiple: int) -> int:
    return -(-n // multiple) * multiple


def batch(pairs: Sequence[Pair], C: int, max_len: int, max_src_len: int | None = None) -> EncodedBatch:
    """Append eos to each target, pad targets to a multiple of ``C`` and sources to the batch max."""
    if not pairs:
        raise ValueError("cannot batch an empty list of pairs")
    max_src_len = max_len if max_src_len is None else max_src_len
    for i, (x, y) in enumerate(pairs):
        if len(y) + 1 > max_len:
            raise LengthError(f"pair {i}: target length {len(y)} + eos exceeds max_len {max_len}")
        if len(x) > max_src_len:
            raise LengthError(f"pair {i}: source length {len(x)} exceeds {max_src_len}")
        if len(x) == 0:
            raise LengthError(f"pair {i}: empty source")
    k = max(len(x) for x, _ in pairs)
    n = round_up(max(len(y) + 1 for _, y in pairs), C)
    if n > round_up(max_len, C):
        raise LengthError(f"padded target length {n} exceeds {max_len}")
    xb = np.full((len(pairs), k), PAD, dtype=np.int64)
    yb = np.full((len(pairs), n), PAD, dtype=np.int64)
    for i, (x, y) in enumerate(pairs):
        xb[i, : len(x)] = x
        yb[i, : len(y)] = y
        yb[i, len(y)] = EOS
    return EncodedBatch(xb, yb, xb != PAD, yb != PAD)


def unbatch(b: EncodedBatch) -> list[Pair]:
    """Inverse of :func:`batch`: strip pads and the target eos."""
    out = []
    for xr, yr in zip(b.x, b.y):
        x = [int(t) for t in xr if t != PAD]
        y = [int(t) for t in yr if t != PAD]
        if y and y[-1] == EOS:
            y = y[:-1]
        out.append((x, y))
    return out


def strip_output(ids: Sequence[int]) -> list[int]:
    """Model output up to the first eos."""
    out = []
    for t in ids:
        if int(t) == EOS:
            break
        out.append(int(t))
    return out


def token_accuracy(predictions: Sequence[Sequence[int]], references: Sequence[Sequence[int]]) -> float:
    """Fraction of reference positions (eos included) predicted exactly."""
    hit = total = 0
    for pred, ref in zip(predictions, references):
        ref = list(ref) + [EOS]
        pred = list(pred) + [EOS]
        total += len(ref)
        hit += sum(1 for i, t in enumerate(ref) if i < len(pred) and pred[i] == t)
    return hit / total if total else 0.0
