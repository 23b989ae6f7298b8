"""Command-line entry point.

Exit codes: 0 on success or a passed verification, 1 on runtime or data
failures (including a failed verification), 2 on usage errors.
"""

import argparse
import logging
import sys
from typing import Optional, Sequence

import lrse.commands as cmd
from lrse import __version__, config

DESCRIPTION = """
Low-rank compression of Whisper-style Transformer encoders. Linear layers whose
activations concentrate in a few principal directions are replaced by a pair of
thin matrices, and self-attention is evaluated in the reduced dimension where
that is cheaper.
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrse", description=DESCRIPTION)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command in cmd.COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    level = None
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    config.setup_logging(level)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
