"""`compress`: select ranks and write the factorized encoder."""

import argparse
import logging
from pathlib import Path

from lrse.algorithm import flops
from lrse.algorithm.compress import CompressedEncoder, compress_encoder
from lrse.commands.common import EXIT_OK, add_policy_args, handles_errors, run_config
from lrse.errors import ShapeError
from lrse.storage.model_store import load_stats, load_weights, save_compressed

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("compress", help="factorize layers whose activations are low-rank")
    parser.add_argument("--model", required=True, help="weights archive")
    parser.add_argument("--stats", required=True, help="statistics archive of the same model")
    add_policy_args(parser)
    parser.add_argument("--report", help="write the cost report as JSON here")
    parser.add_argument("-o", "--output", required=True, help="compressed archive to write")
    parser.set_defaults(handler=cmd_compress)


def format_decisions(compressed: CompressedEncoder) -> str:
    """One row per tap, grouped by block."""
    lines = [f"{'tap':<12}{'k':>7}{'cap':>6}{'theta':>8}{'variance':>12}{'ratio':>8}"]
    for d in compressed.decisions:
        k = "dense" if d.is_dense else str(d.k)
        lines.append(
            f"{str(d.tap):<12}{k:>7}{d.efficiency_cap:>6}{d.theta_used:>8.4g}"
            f"{d.variance_captured:>12.6f}{d.rank_ratio:>8.3f}"
        )
    return "\n".join(lines)


def run_compress(model: Path, stats_path: Path, policy) -> CompressedEncoder:
    """Loads a model and its statistics and compresses it under `policy`.

    Raises:
        ShapeError: If the statistics belong to another architecture.
    """
    weights = load_weights(model)
    spec, stats = load_stats(stats_path)
    if spec != weights.spec:
        raise ShapeError(f"statistics were collected for {spec}, the model is {weights.spec}")
    return compress_encoder(weights, stats, policy)


@handles_errors
def cmd_compress(args: argparse.Namespace) -> int:
    config = run_config(args, model=args.model, stats=args.stats, output=args.output)
    compressed = run_compress(config.model, config.stats, config.policy())
    save_compressed(config.output, compressed)

    rep = flops.report(compressed)
    print(format_decisions(compressed))
    print()
    print(flops.format_report(rep))
    if args.report:
        Path(args.report).write_text(rep.model_dump_json(indent=2) + "\n")
    return EXIT_OK
