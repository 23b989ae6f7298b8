"""`import-whisper`: convert an `.npz` Whisper encoder state dict."""

import argparse

from lrse.commands.common import EXIT_OK, handles_errors
from lrse.storage.model_store import save_weights
from lrse.storage.whisper_import import import_whisper


def register(subparsers) -> None:
    parser = subparsers.add_parser("import-whisper", help="convert a Whisper encoder checkpoint")
    parser.add_argument("--checkpoint", required=True, help=".npz export of the encoder state dict")
    parser.add_argument("--heads", type=int, required=True, help="attention heads (20 for large-v3)")
    parser.add_argument("-o", "--output", required=True, help="weights archive to write")
    parser.set_defaults(handler=cmd_import_whisper)


@handles_errors
def cmd_import_whisper(args: argparse.Namespace) -> int:
    save_weights(args.output, import_whisper(args.checkpoint, args.heads))
    return EXIT_OK
