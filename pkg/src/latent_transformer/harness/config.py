"""Run configuration: flat ``section.key = value`` text with ``include`` lines.

Example::

    include = base.cfg
    # comments start with '#'
    model.bottleneck = dvq
    model.n_d = 2
    task.kind = cipher
    train.steps = 2000

Included files are read first (paths relative to the including file), so
later assignments override earlier ones.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..autoencoder import ModelConfig
from ..data import TaskSpec
from ..errors import ConfigError


@dataclass
class TrainSettings:
    steps: int = 2000  # <= 20K at desk scale
    batch_size: int = 32
    lr: float = 2e-3
    warmup_steps: int = 200
    clip_norm: float = 1.0
    eval_every: int = 100
    eval_size: int = 128
    checkpoint_every: int = 0  # 0 = only at the end
    usage_bin: int = 100  # steps per histogram bin
    train_predictor: bool = True
    train_baseline: bool = True


@dataclass
class DecodeSettings:
    mode: str = "greedy"  # greedy | sample | topk
    k: int = 10
    temperature: float = 1.0
    batch_size: int = 64
    count: int = 128
    input: str = ""  # one whitespace-tokenized source per line; empty = sample the task
    references: str = ""
    accuracy: bool = False  # require references with decode.input
    timing: bool = False
    fixed_length: int = 0  # >0: force every sequence to this many target tokens (timing runs)


@dataclass
class DiagnoseSettings:
    collapse_threshold: float = 0.2
    count: int = 512


@dataclass
class SweepSettings:
    ratios: str = "2,4,8"
    bits: str = "8,14"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    decode: DecodeSettings = field(default_factory=DecodeSettings)
    diagnose: DiagnoseSettings = field(default_factory=DiagnoseSettings)
    sweep: SweepSettings = field(default_factory=SweepSettings)

    SECTIONS = ("model", "task", "train", "decode", "diagnose", "sweep")

    def validate(self) -> None:
        self.finalize()
        self.model.validate()
        self.task.validate()
        t = self.train
        if t.steps < 0 or t.batch_size < 1 or t.eval_every < 1 or t.usage_bin < 1:
            raise ConfigError("train.steps >= 0, batch_size/eval_every/usage_bin >= 1 required")
        if t.lr <= 0:
            raise ConfigError("train.lr must be positive")
        if self.decode.mode not in ("greedy", "sample", "topk"):
            raise ConfigError(f"unknown decode.mode {self.decode.mode!r}")
        if self.decode.k < 1:
            raise ConfigError("decode.k must be >= 1")
        if not 0.0 <= self.diagnose.collapse_threshold <= 1.0:
            raise ConfigError("diagnose.collapse_threshold must lie in [0, 1]")
        if self.task.kind != "file" and self.task.max_len + 1 > self.model.max_tgt_len:
            raise ConfigError(
                f"task.max_len {self.task.max_len} + eos exceeds model.max_tgt_len {self.model.max_tgt_len}"
            )

    def finalize(self) -> None:
        """Fill derived values: vocabulary size and seeds from the task."""
        if self.task.kind != "file" and not self.model.vocab_size:
            self.model.vocab_size = self.task.vocab_size

    def with_seed(self, seed: int) -> "RunConfig":
        out = dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, seed=seed),
            task=dataclasses.replace(self.task, seed=seed),
        )
        return out

    def to_text(self) -> str:
        lines = []
        for section in self.SECTIONS:
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                lines.append(f"{section}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def set(self, key: str, raw: str) -> None:
        section, _, name = key.partition(".")
        if section not in self.SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        obj = getattr(self, section)
        types = {f.name: f.type for f in dataclasses.fields(obj)}
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(obj, name, _coerce(key, raw, getattr(obj, name)))


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key: str, raw: str, current: Any) -> Any:
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def parse_lines(path: Path, seen: tuple[Path, ...] = ()) -> list[tuple[str, str]]:
    path = Path(path).resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    out: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        if key == "include":
            out.extend(parse_lines(path.parent / value, seen + (path,)))
        else:
            out.append((key, value))
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        for key, value in parse_lines(Path(path)):
            cfg.set(key, value)
    for key, value in (overrides or {}).items():
        cfg.set(key, str(value))
    cfg.finalize()
    return cfg


def parse_config_text(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        if key.strip() == "include":
            raise ConfigError("include is not allowed in embedded config text")
        cfg.set(key.strip(), value.strip())
    cfg.finalize()
    return cfg
