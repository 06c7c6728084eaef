"""``kvguard <experiment> --config <file> --out <dir>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from kvguard.harness import COMMANDS, ConfigError, ExperimentConfig, ExperimentFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSERTION = 3


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvguard", description="Bit-flip experiments on a shared prefix KV cache.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=_u64)
        p.add_argument("--integrity", choices=("on", "off"))
        p.add_argument("--ttl", type=_positive)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {
        "out_dir": args.out,
        "seed": args.seed,
        "integrity": None if args.integrity is None else args.integrity == "on",
        "ttl": args.ttl,
    }
    try:
        raw: dict = {}
        if args.config:
            try:
                with open(args.config) as fh:
                    raw = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError("config must be a JSON object")
        if raw.get("experiment", args.experiment) != args.experiment:
            raise ConfigError(f"config is for {raw['experiment']!r}, not {args.experiment!r}")
        cfg = ExperimentConfig.from_dict({**raw, "experiment": args.experiment}, **overrides)
        COMMANDS[cfg.experiment](cfg)
    except ConfigError as exc:
        print(f"kvguard: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ExperimentFailure as exc:
        print(f"kvguard: check failed: {exc}", file=sys.stderr)
        return EXIT_ASSERTION
    print(f"kvguard: {args.experiment} done, results in {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
