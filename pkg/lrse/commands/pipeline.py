"""`pipeline`: synth → gen-calib → calibrate → compress → verify in one run."""

import argparse
import logging
from pathlib import Path

from lrse.algorithm import flops
from lrse.algorithm.calib import collect_stats
from lrse.algorithm.compress import compress_encoder
from lrse.algorithm.encoder import synth_weights
from lrse.commands.common import (
    EXIT_FAILURE,
    EXIT_OK,
    add_policy_args,
    add_spec_args,
    handles_errors,
    run_config,
    spec_from_args,
)
from lrse.commands.compress import format_decisions
from lrse.commands.verify import format_verify, probe_inputs, verify_models
from lrse.storage.calib_data import synth_calib
from lrse.storage.model_store import save_calib, save_compressed, save_stats, save_weights

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("pipeline", help="run the whole desk-scale pipeline")
    add_spec_args(parser)
    parser.add_argument("--weight-rank", type=int, help="inner dimension of every linear weight")
    parser.add_argument("--n-calib", type=int, default=100)
    parser.add_argument("--rank", type=int, default=4, help="effective rank of calibration and probe clips")
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--seed", type=int, default=0)
    add_policy_args(parser)
    parser.add_argument("--probes", type=int, default=8)
    parser.add_argument("--probe-seed", type=int, default=1, help="seed of the held-out probe clips")
    parser.add_argument("--tolerance", type=float, default=0.05)
    parser.add_argument("--work-dir", required=True, help="directory for the intermediate archives")
    parser.set_defaults(handler=cmd_pipeline)


@handles_errors
def cmd_pipeline(args: argparse.Namespace) -> int:
    work = Path(args.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    config = run_config(
        args,
        model=work / "model.lrta",
        calib=work / "calib.lrta",
        stats=work / "stats.lrta",
        output=work / "compressed.lrta",
        seed=args.seed,
        tolerance=args.tolerance,
    )
    spec = spec_from_args(args)

    logger.info("synthesizing weights")
    weights = synth_weights(spec, config.seed, weight_rank=args.weight_rank)
    save_weights(config.model, weights, seed=config.seed)

    logger.info("synthesizing %d calibration clips", args.n_calib)
    calib = synth_calib(spec, args.n_calib, args.rank, noise=args.noise, seed=config.seed)
    save_calib(config.calib, calib, {"rank": args.rank, "noise": args.noise, "seed": config.seed})

    logger.info("calibrating")
    stats = collect_stats(spec, weights, calib)
    save_stats(config.stats, spec, stats)

    logger.info("compressing")
    compressed = compress_encoder(weights, stats, config.policy())
    save_compressed(config.output, compressed)
    rep = flops.report(compressed)
    (work / "report.json").write_text(rep.model_dump_json(indent=2) + "\n")
    print(format_decisions(compressed))
    print()

    logger.info("verifying on held-out clips")
    probes = probe_inputs(spec, args.probes, args.probe_seed, args.rank, args.noise, basis_seed=config.seed)
    check = verify_models(weights, compressed, probes, config.tolerance)
    (work / "verify.json").write_text(check.model_dump_json(indent=2) + "\n")
    print(format_verify(check))
    print(f"total MACs ratio {rep.total_ratio:.4f}, size {100.0 * rep.size_fraction:.1f}%")
    return EXIT_OK if check.passed else EXIT_FAILURE
