"""Command-line entry point: ``sliceprop <subcommand> --config <path>``.

Exit codes: 0 success, 2 usage/config error, 3 stage-dependency error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigError, NumericError, StageDependencyError
from .pipeline import STAGES, load_config, resolve_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_NUMERIC = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sliceprop",
        description=(
            "Self-supervised slice-to-volume mask propagation: synthesize "
            "phantoms, train, generate/refine pseudo-labels, propagate, and "
            "evaluate."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in STAGES.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", help="config file (JSON or key=value lines)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    overrides = {"seed": args.seed, "out": args.out}
    try:
        if args.config:
            cfg = load_config(args.config, overrides)
        else:
            cfg = resolve_config({}, overrides)
        STAGES[args.command](cfg)
    except ConfigError as exc:
        print(f"sliceprop: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageDependencyError as exc:
        print(f"sliceprop: stage dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericError as exc:
        print(f"sliceprop: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
