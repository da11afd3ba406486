"""Command line entry point: ``dgflow <subcommand> --config <path> [--out <dir>] [--seed <u64>]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from .config import ConfigError, RunConfig, load_config, validate
from .harness import EXIT_CONFIG, SUBCOMMANDS, run

OUT_ENV = "DGFLOW_OUT"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgflow", description=__doc__)
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="flat JSON config or a previous run's manifest.json")
    parser.add_argument("--out", help=f"output directory (default: config 'out', or ${OUT_ENV})")
    parser.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else validate(RunConfig())
        if args.seed is not None:
            cfg = validate(replace(cfg, seed=args.seed))
    except ConfigError as exc:
        print(json.dumps({"status": "config-error", "message": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or os.environ.get(OUT_ENV) or cfg.out
    code = run(args.subcommand, cfg, out)
    if code == 0:
        print(f"{args.subcommand}: ok ({out}/manifest.json)")
    else:
        with open(os.path.join(out, "error.json"), encoding="utf-8") as fh:
            print(fh.read(), file=sys.stderr, end="")
    return code


if __name__ == "__main__":
    sys.exit(main())
