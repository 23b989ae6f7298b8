"""`calibrate`: PCA statistics of every linear layer."""

import argparse
import logging

from lrse.algorithm.calib import collect_stats, spectrum_summary
from lrse.commands.common import EXIT_OK, handles_errors
from lrse.schemas import ordered
from lrse.storage.model_store import load_calib, load_weights, save_stats

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("calibrate", help="collect activation statistics")
    parser.add_argument("--model", required=True, help="weights archive")
    parser.add_argument("--calib", required=True, help="calibration archive")
    parser.add_argument("--workers", type=int, help="threads for per-clip forwards (default: LRSE_THREADS)")
    parser.add_argument("-o", "--output", required=True, help="statistics archive to write")
    parser.set_defaults(handler=cmd_calibrate)


def format_spectra(stats) -> str:
    lines = []
    for tap in ordered(stats):
        values = " ".join(f"{v:.4f}" for v in spectrum_summary(stats[tap]))
        lines.append(f"{str(tap):<12}{values}")
    return "\n".join(lines)


@handles_errors
def cmd_calibrate(args: argparse.Namespace) -> int:
    weights = load_weights(args.model)
    calib = load_calib(args.calib)
    stats = collect_stats(weights.spec, weights, calib, workers=args.workers)
    save_stats(args.output, weights.spec, stats)
    print(format_spectra(stats))
    return EXIT_OK
