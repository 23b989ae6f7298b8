"""`sweep`: compress and verify over a grid of variance thresholds.

CSV columns: theta_attn, theta_mlp, params, macs, rel_err, where params is
the compressed parameter count, macs the modeled total MACs and rel_err the
maximum relative output error over the probes.
"""

import argparse
import csv
import io
import logging
import sys
from itertools import product
from pathlib import Path
from typing import List, Sequence, Tuple

from lrse.algorithm import flops
from lrse.algorithm.compress import compress_encoder
from lrse.algorithm.encoder import EncoderWeights
from lrse.commands.common import EXIT_FAILURE, EXIT_OK, handles_errors
from lrse.commands.verify import probe_inputs, verify_models
from lrse.errors import ShapeError, UsageError
from lrse.schemas import SWEEP_COLUMNS, RankPolicy, SweepRow
from lrse.storage.model_store import load_stats, load_weights

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("sweep", help="threshold sensitivity study")
    parser.add_argument("--model", required=True, help="weights archive")
    parser.add_argument("--stats", required=True, help="statistics archive of the same model")
    thetas = parser.add_mutually_exclusive_group(required=True)
    thetas.add_argument("--theta", type=float, nargs="+", help="thresholds applied to both groups")
    thetas.add_argument("--theta-attn", type=float, nargs="+", help="attention thresholds (grid with --theta-mlp)")
    parser.add_argument("--theta-mlp", type=float, nargs="+", help="MLP thresholds (grid with --theta-attn)")
    parser.add_argument("--granularity", type=int, default=16)
    parser.add_argument("--probes", type=int, default=4)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--rank", type=int, help="draw probes from the low-rank generator with this rank")
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--basis-seed", type=int)
    parser.add_argument("-o", "--output", help="CSV file (default: stdout)")
    parser.set_defaults(handler=cmd_sweep)


def theta_grid(args: argparse.Namespace) -> List[Tuple[float, float]]:
    if args.theta is not None:
        if args.theta_mlp is not None:
            raise UsageError("--theta excludes --theta-mlp")
        return [(t, t) for t in args.theta]
    if not args.theta_mlp:
        raise UsageError("--theta-attn needs --theta-mlp")
    return list(product(args.theta_attn, args.theta_mlp))


def run_sweep(
    weights: EncoderWeights,
    stats,
    grid: Sequence[Tuple[float, float]],
    granularity: int,
    probes,
) -> List[SweepRow]:
    """One compression, cost report and verification per threshold pair."""
    if not grid:
        raise UsageError("empty threshold list")
    rows = []
    for theta_attn, theta_mlp in grid:
        policy = RankPolicy(theta_attn=theta_attn, theta_mlp=theta_mlp, granularity=granularity)
        compressed = compress_encoder(weights, stats, policy)
        rep = flops.report(compressed)
        check = verify_models(weights, compressed, probes, tolerance=1.0)
        rows.append(
            SweepRow(
                theta_attn=theta_attn,
                theta_mlp=theta_mlp,
                params=rep.params_compressed,
                macs=rep.total_compressed_macs,
                rel_err=check.max_rel_err,
                certificates_ok=check.certificates_ok,
            )
        )
        logger.debug("theta %g/%g: params %d rel_err %.3e", theta_attn, theta_mlp, rows[-1].params, rows[-1].rel_err)
    return rows


def _adjacent_pairs(rows: Sequence[SweepRow]):
    """Neighbouring rows along one threshold with the other fixed, and along
    the diagonal where both thresholds are equal."""
    for axis, other in (("theta_attn", "theta_mlp"), ("theta_mlp", "theta_attn")):
        lines = {}
        for row in rows:
            lines.setdefault(getattr(row, other), []).append(row)
        for line in lines.values():
            line = sorted(line, key=lambda r: getattr(r, axis))
            for a, b in zip(line, line[1:]):
                if getattr(a, axis) < getattr(b, axis):
                    yield a, b
    diagonal = sorted((r for r in rows if r.theta_attn == r.theta_mlp), key=lambda r: r.theta_attn)
    for a, b in zip(diagonal, diagonal[1:]):
        if a.theta_attn < b.theta_attn:
            yield a, b


def monotonicity_violations(rows: Sequence[SweepRow]) -> List[str]:
    """Parameter count must not drop when a threshold rises."""
    return [
        f"params fall from {a.params} to {b.params} between ({a.theta_attn}, {a.theta_mlp}) "
        f"and ({b.theta_attn}, {b.theta_mlp})"
        for a, b in _adjacent_pairs(rows)
        if b.params < a.params
    ]


def error_trend(rows: Sequence[SweepRow]) -> float:
    """Fraction of adjacent pairs whose error does not grow with the threshold."""
    pairs = list(_adjacent_pairs(rows))
    if not pairs:
        return 1.0
    return sum(b.rel_err <= a.rel_err for a, b in pairs) / len(pairs)


def write_csv(rows: Sequence[SweepRow], stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow([getattr(row, column) for column in SWEEP_COLUMNS])


@handles_errors
def cmd_sweep(args: argparse.Namespace) -> int:
    grid = theta_grid(args)
    weights = load_weights(args.model)
    spec, stats = load_stats(args.stats)
    if spec != weights.spec:
        raise ShapeError(f"statistics were collected for {spec}, the model is {weights.spec}")
    probes = probe_inputs(spec, args.probes, args.seed, args.rank, args.noise, args.basis_seed)
    rows = run_sweep(weights, stats, grid, args.granularity, probes)

    if args.output:
        buffer = io.StringIO()
        write_csv(rows, buffer)
        Path(args.output).write_text(buffer.getvalue())
    else:
        write_csv(rows, sys.stdout)

    violations = monotonicity_violations(rows)
    for v in violations:
        logger.warning("monotonicity: %s", v)
    uncertified = [r for r in rows if not r.certificates_ok]
    for r in uncertified:
        logger.warning("certificates violated at theta %g/%g", r.theta_attn, r.theta_mlp)
    trend = error_trend(rows)
    logger.info("error non-increasing in %.0f%% of adjacent threshold pairs", 100.0 * trend)
    return EXIT_FAILURE if violations or uncertified else EXIT_OK
