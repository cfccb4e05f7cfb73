"""Command line entry point.

Exit codes: 0 success, 1 usage error, 2 bad data or config, 3 numeric
failure during training or inference.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .errors import DataError, NumericError
from .pipeline import STAGES, load_config, run_pipeline


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulegraph",
        description="Weakly supervised tagging: propagate seed labeling rules "
                    "over a rule similarity graph, fit a generative label "
                    "model, and train a feature-based tagger.",
    )
    parser.add_argument("stage", choices=STAGES,
                        help="pipeline stage to run ('all' runs every stage in order)")
    parser.add_argument("--config", required=True, metavar="FILE",
                        help="JSON pipeline config")
    parser.add_argument("--out", metavar="DIR", default=None,
                        help="override the config's output_dir")
    parser.add_argument("--seed", type=int, default=None, metavar="N",
                        help="override the config's seed")
    parser.add_argument("-q", "--quiet", action="store_true",
                        help="only warnings and errors")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the contract here is 1
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, output_dir=args.out, seed=args.seed)
        run_pipeline(cfg, args.stage)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
