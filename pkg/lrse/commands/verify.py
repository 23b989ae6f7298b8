"""`verify`: output agreement of a compressed encoder with its original."""

import argparse
import logging
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from lrse.algorithm import flops
from lrse.algorithm.compress import CompressedEncoder, forward_compressed, path_residuals
from lrse.algorithm.encoder import EncoderWeights, forward
from lrse.algorithm.linalg import Matrix
from lrse.commands.common import EXIT_FAILURE, EXIT_OK, handles_errors
from lrse.errors import ShapeError, UsageError
from lrse.schemas import EncoderSpec, RunConfig, VerifyReport
from lrse.storage.calib_data import synth_calib
from lrse.storage.model_store import load_compressed, load_weights

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("verify", help="compare compressed and original outputs")
    parser.add_argument("--original", required=True, help="weights archive")
    parser.add_argument("--compressed", required=True, help="compressed archive")
    parser.add_argument("--probes", type=int, default=8, help="number of probe inputs")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--tolerance", type=float, default=0.05, help="bound on max relative error")
    parser.add_argument("--rank", type=int, help="draw probes from the low-rank generator with this rank")
    parser.add_argument("--noise", type=float, default=0.0)
    parser.add_argument("--basis-seed", type=int, help="generator basis seed, to match a calibration set")
    parser.add_argument("--timing", action="store_true", help="log wall-clock time of both forwards")
    parser.add_argument("--json", help="write the report as JSON here")
    parser.set_defaults(handler=cmd_verify)


def probe_inputs(
    spec: EncoderSpec,
    n: int,
    seed: int,
    rank: Optional[int] = None,
    noise: float = 0.0,
    basis_seed: Optional[int] = None,
) -> List[Matrix]:
    """Gaussian inputs, or generator clips when `rank` is given."""
    if rank is not None:
        return list(synth_calib(spec, n, rank, noise=noise, seed=seed, basis_seed=basis_seed).clips)
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((spec.input_len, spec.d_input)) for _ in range(n)]


def relative_error(reference: Matrix, approx: Matrix) -> float:
    """‖approx − reference‖_F / ‖reference‖_F; 0 or inf when the reference is zero."""
    diff = float(np.linalg.norm(approx - reference))
    norm = float(np.linalg.norm(reference))
    if norm == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / norm


def verify_models(
    original: EncoderWeights,
    compressed: CompressedEncoder,
    probes: List[Matrix],
    tolerance: float,
    timing: bool = False,
) -> VerifyReport:
    """Runs both encoders on every probe and checks the cost certificates.

    Raises:
        ShapeError: If the two encoders have different architectures.
    """
    if original.spec != compressed.spec:
        raise ShapeError(f"original is {original.spec}, compressed is {compressed.spec}")
    errors = []
    elapsed_original = elapsed_compressed = 0.0
    for x in probes:
        start = time.perf_counter()
        reference = forward(original.spec, original, x)
        middle = time.perf_counter()
        approx = forward_compressed(compressed, x)
        elapsed_original += middle - start
        elapsed_compressed += time.perf_counter() - middle
        errors.append(relative_error(reference, approx))
    if timing:
        logger.info("forward time: original %.3fs, compressed %.3fs", elapsed_original, elapsed_compressed)

    residuals = path_residuals(compressed, probes[0]) if probes else []
    problems = flops.check_certificates(compressed)
    for problem in problems:
        logger.warning("certificate: %s", problem)

    max_err = max(errors, default=0.0)
    mean_err = float(np.mean(errors)) if errors else 0.0
    finite = bool(np.all(np.isfinite(errors)))
    return VerifyReport(
        probes=len(probes),
        max_rel_err=max_err,
        mean_rel_err=mean_err,
        path_residuals=residuals,
        certificates_ok=not problems,
        tolerance=tolerance,
        passed=finite and max_err <= tolerance and not problems,
    )


def format_verify(rep: VerifyReport) -> str:
    worst_path = max(rep.path_residuals, default=0.0)
    return "\n".join(
        [
            f"probes          {rep.probes}",
            f"max rel error   {rep.max_rel_err:.6e}",
            f"mean rel error  {rep.mean_rel_err:.6e}",
            f"path residual   {worst_path:.3e}",
            f"certificates    {'ok' if rep.certificates_ok else 'VIOLATED'}",
            f"result          {'PASS' if rep.passed else 'FAIL'} (tolerance {rep.tolerance:g})",
        ]
    )


@handles_errors
def cmd_verify(args: argparse.Namespace) -> int:
    config = RunConfig(model=args.original, compressed=args.compressed, seed=args.seed, tolerance=args.tolerance)
    if args.probes < 1:
        raise UsageError("--probes must be positive")
    original = load_weights(config.model)
    compressed = load_compressed(config.compressed)
    probes = probe_inputs(original.spec, args.probes, config.seed, args.rank, args.noise, args.basis_seed)
    rep = verify_models(original, compressed, probes, config.tolerance, timing=args.timing)
    print(format_verify(rep))
    if args.json:
        Path(args.json).write_text(rep.model_dump_json(indent=2) + "\n")
    return EXIT_OK if rep.passed else EXIT_FAILURE
