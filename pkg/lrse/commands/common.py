"""Helpers shared by the sub-commands: architecture flags, policy flags and the
error-to-exit-code mapping."""

import argparse
import functools
import logging

from pydantic import ValidationError

from lrse.errors import LrseError, UsageError
from lrse.schemas import EncoderSpec, RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def add_spec_args(parser: argparse.ArgumentParser) -> None:
    """Architecture flags; defaults give the toy encoder."""
    group = parser.add_argument_group("encoder architecture")
    group.add_argument("--layers", type=int, default=4, help="number of blocks")
    group.add_argument("--dmodel", type=int, default=32, help="residual width")
    group.add_argument("--heads", type=int, default=4, help="attention heads")
    group.add_argument("--dff", type=int, default=128, help="MLP hidden width")
    group.add_argument("--seqlen", type=int, default=64, help="sequence length L")
    group.add_argument("--conv-stem", action="store_true", help="add the stride-2 conv front end")
    group.add_argument("--mels", type=int, default=80, help="conv stem input width")
    group.add_argument("--final-norm", action="store_true", help="add a post-stack layernorm")


def spec_from_args(args: argparse.Namespace) -> EncoderSpec:
    return EncoderSpec(
        n_layers=args.layers,
        d_model=args.dmodel,
        n_heads=args.heads,
        d_ff=args.dff,
        seq_len=args.seqlen,
        has_conv_stem=args.conv_stem,
        n_mels=args.mels,
        final_norm=args.final_norm,
    )


def add_policy_args(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("rank policy")
    group.add_argument("--preset", choices=["a", "b", "c"], help="a: 0.999/0.999, b: 0.99/0.999, c: 0.99/0.995")
    group.add_argument("--theta-attn", type=float, help="variance threshold of q/k/v/out projections")
    group.add_argument("--theta-mlp", type=float, help="variance threshold of fc1/fc2")
    group.add_argument("--granularity", type=int, default=16, help="rank step (default: 16)")


def run_config(args: argparse.Namespace, **fields) -> RunConfig:
    """Validates policy flags; a validation failure is a usage error."""
    return RunConfig(
        preset=args.preset,
        theta_attn=args.theta_attn,
        theta_mlp=args.theta_mlp,
        granularity=args.granularity,
        **fields,
    )


def exit_code(error: Exception) -> int:
    if isinstance(error, (UsageError, ValidationError)):
        return EXIT_USAGE
    return EXIT_FAILURE


def handles_errors(handler):
    """Maps lrse, validation and I/O errors raised by a handler onto exit codes."""

    @functools.wraps(handler)
    def wrapper(args: argparse.Namespace) -> int:
        try:
            return handler(args)
        except (LrseError, ValidationError, OSError) as e:
            logger.error("%s: %s", args.command, e)
            return exit_code(e)

    return wrapper
