"""`synth` and `gen-calib`: desk-scale weights and calibration clips."""

import argparse
import logging

from lrse.algorithm.encoder import synth_weights
from lrse.commands.common import EXIT_OK, add_spec_args, handles_errors, spec_from_args
from lrse.storage.calib_data import synth_calib
from lrse.storage.model_store import save_calib, save_weights

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("synth", help="generate pseudo-random encoder weights")
    add_spec_args(parser)
    parser.add_argument("--weight-rank", type=int, help="inner dimension of every linear weight")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-o", "--output", required=True, help="weights archive to write")
    parser.set_defaults(handler=cmd_synth)

    parser = subparsers.add_parser("gen-calib", help="generate low-rank-plus-noise calibration clips")
    add_spec_args(parser)
    parser.add_argument("--n", type=int, default=100, help="number of clips (default: 100)")
    parser.add_argument("--rank", type=int, required=True, help="effective rank of the clips")
    parser.add_argument("--noise", type=float, default=0.0, help="noise standard deviation")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--basis-seed", type=int, help="seed of the shared basis (default: --seed)")
    parser.add_argument("-o", "--output", required=True, help="calibration archive to write")
    parser.set_defaults(handler=cmd_gen_calib)


@handles_errors
def cmd_synth(args: argparse.Namespace) -> int:
    spec = spec_from_args(args)
    weights = synth_weights(spec, args.seed, weight_rank=args.weight_rank)
    save_weights(args.output, weights, seed=args.seed)
    logger.info("%d parameters", weights.param_count())
    return EXIT_OK


@handles_errors
def cmd_gen_calib(args: argparse.Namespace) -> int:
    spec = spec_from_args(args)
    calib = synth_calib(spec, args.n, args.rank, noise=args.noise, seed=args.seed, basis_seed=args.basis_seed)
    save_calib(
        args.output,
        calib,
        {"rank": args.rank, "noise": args.noise, "seed": args.seed, "basis_seed": args.basis_seed},
    )
    return EXIT_OK
