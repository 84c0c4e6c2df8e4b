"""Command-line entry point.

Subcommands: extract, validate. Exit codes: 0 success, 1 usage error,
2 data or model error (including a validation report with any failed
check). The log level comes from the EXTRACT_LOG environment variable.

transformers and torch are imported inside the handlers so that --help
stays fast.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .errors import ExtractionError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

log = logging.getLogger("embed_extract.cli")


class _UsageError(Exception):
    pass


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; our contract reserves 2 for data errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def cmd_extract(args) -> int:
    from .extract import ExtractionJob, extract

    result = extract(
        ExtractionJob(
            corpus=args.corpus,
            out=args.out,
            model=args.model,
            batch_size=args.batch,
            device=args.device,
        )
    )
    print(json.dumps({"path": result.path, "sentences": result.sentences, "dim": result.dim}))
    return EXIT_OK


def cmd_validate(args) -> int:
    from .extract import validate

    report = validate(
        args.file,
        args.corpus,
        model=args.model,
        device=args.device,
        sample_index=args.sample,
    )
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK if report.ok else EXIT_DATA


def build_parser() -> argparse.ArgumentParser:
    from .extract import DEFAULT_MODEL

    parser = _ArgumentParser(prog="embed-extract")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="write an EMB1 file for a preprocessed corpus")
    p.add_argument("--model", default=DEFAULT_MODEL, help="model identifier or local path")
    p.add_argument("--corpus", required=True, help="one preprocessed sentence per line")
    p.add_argument("--out", required=True, help="output EMB1 path")
    p.add_argument("--batch", type=int, default=8, help="sentences per forward pass")
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("validate", help="check an EMB1 file against its corpus")
    p.add_argument("--file", required=True, help="EMB1 path to check")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", default=DEFAULT_MODEL)
    p.add_argument("--device", default="cpu")
    p.add_argument("--sample", type=int, default=None, help="sentence index for the recompute check")
    p.set_defaults(func=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("EXTRACT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    try:
        args = build_parser().parse_args(argv)
        if args.func is cmd_extract and args.batch < 1:
            raise _UsageError("--batch must be >= 1")
        return args.func(args)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ExtractionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
