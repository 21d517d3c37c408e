"""Command line entry point.

    latent-transformer train|eval|decode|diagnose|sweep --config PATH --seed N --out DIR

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import CheckpointError, ConfigError, LengthError, NumericError, ParseError
from .harness.config import RunConfig, load_config
from .harness.decode import run_decode
from .harness.diagnose import run_diagnose, run_eval, run_sweep
from .harness.train import Trainer, load_run

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("train", "eval", "decode", "diagnose", "sweep")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latent-transformer", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--seed", type=int, default=None, help="overrides model.seed and task.seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--checkpoint", type=Path,
                   help="checkpoint file or training directory (eval/decode/diagnose; default --out)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key; repeatable")
    p.add_argument("--resume", action="store_true", help="train: continue from OUT/checkpoint.bin")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args) -> RunConfig:
    cfg = load_config(args.config, _overrides(args.set))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def run(args) -> dict:
    cfg = _config(args)
    if args.command == "train":
        cfg.validate()
        return Trainer(cfg, args.out, resume=args.resume).run()
    if args.command == "sweep":
        cfg.validate()
        return run_sweep(cfg, args.out)
    loaded = load_run(args.checkpoint or args.out, cfg)
    seed = args.seed if args.seed is not None else loaded.cfg.model.seed
    if args.command == "eval":
        return run_eval(loaded, args.out)
    if args.command == "decode":
        return run_decode(loaded, args.out, seed=seed)
    return run_diagnose(loaded, args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, LengthError, ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
