"""``lossnet`` command line: one subcommand per experiment class."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import COMMANDS, ConfigError, parse_config
from .harness import EXIT_CONFIG, OUT_ENV, run


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="YAML experiment config")
    common.add_argument("--out", help=f"output directory (overrides config; env {OUT_ENV})")
    common.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, help="worker pool size (default: CPU count)")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    parser = argparse.ArgumentParser(prog="lossnet", description="loss-network metastability experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text()
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text, args.command)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError([f"--seed: {args.seed} is not an unsigned 64-bit integer"])
            cfg.seed = args.seed
        if args.threads is not None and args.threads < 1:
            raise ConfigError(["--threads: must be at least 1"])
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    bundle = run(cfg, out=args.out, threads=args.threads)
    status = bundle.manifest.get("status")
    if bundle.manifest.get("error"):
        print(f"error: {bundle.manifest['error']}", file=sys.stderr)
    for name in sorted(bundle.files):
        print(bundle.out_dir / name)
    print(bundle.out_dir / "manifest.json")
    print(f"status: {status}")
    return bundle.exit_code


if __name__ == "__main__":
    sys.exit(main())
