"""Calibration: pooled activation statistics and their principal directions."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional

import numpy as np

from lrse import config
from lrse.algorithm.encoder import EncoderWeights, forward_with_taps
from lrse.algorithm.linalg import Matrix, Vector, matmul, sym_eig
from lrse.errors import DataError, ShapeError, UsageError
from lrse.schemas import EncoderSpec, TapPoint, ordered
from lrse.storage.calib_data import CalibSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActivationStats:
    """PCA statistics of one tapped layer over all calibration rows.

    Attributes:
        tap (TapPoint): Layer the statistics describe.
        mean (Vector): Sample mean Y_M, length D_out.
        eigenvalues (Vector): Eigenvalues of the centered scatter matrix, descending;
            these are the squared singular values of the centered data.
        basis (Matrix): D_out × D_out, columns are the principal directions.
        sample_count (int): L · N_calib.
    """

    tap: TapPoint
    mean: Vector
    eigenvalues: Vector
    basis: Matrix
    sample_count: int

    def projector(self, k: int) -> Matrix:
        """V_k·V_kᵀ, the orthogonal projector onto the top-k directions."""
        v_k = self.basis[:, :k]
        return matmul(v_k, v_k.T)

    def normalized_spectrum(self) -> Vector:
        total = self.eigenvalues.sum()
        if total <= 0.0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / total


def pooled_scatter(activations: List[Matrix]):
    """Mean and centered scatter Σ(y − Y_M)ᵀ(y − Y_M) of row-stacked blocks.

    Two passes in list order: sums for the mean, then per-block scatter
    products added up.

    Returns:
        tuple: (mean, scatter, row count).
    """
    count = sum(y.shape[0] for y in activations)
    total = np.zeros(activations[0].shape[1])
    for y in activations:
        total += y.sum(axis=0)
    mean = total / count

    scatter = np.zeros((mean.size, mean.size))
    for y in activations:
        centered = y - mean
        scatter += matmul(centered.T, centered)
    return mean, scatter, count


def collect_stats(
    spec: EncoderSpec,
    weights: EncoderWeights,
    calib: CalibSet,
    taps: Optional[Iterable[TapPoint]] = None,
    workers: Optional[int] = None,
) -> Dict[TapPoint, ActivationStats]:
    """Runs every clip through the original encoder and decomposes the pooled
    activations of each tap.

    Args:
        spec (EncoderSpec): Architecture.
        weights (EncoderWeights): Original dense weights.
        calib (CalibSet): Calibration clips.
        taps (Iterable[TapPoint] | None): Taps to analyze; all six sites of every
            layer when omitted.
        workers (int | None): Threads for the per-clip forwards; `LRSE_THREADS`
            when omitted. Results do not depend on it.

    Returns:
        Dict[TapPoint, ActivationStats]: Statistics per tap.

    Raises:
        UsageError: If the calibration set is empty.
        ShapeError: If the clips do not fit the encoder input.
        DataError: If a tap produces non-finite activations.
    """
    if calib.n_calib == 0:
        raise UsageError("calibration set is empty")
    taps = ordered(taps if taps is not None else spec.all_taps())
    expected = (spec.input_len, spec.d_input)
    if calib.clip_shape != expected:
        raise ShapeError(
            f"{taps[0] if taps else 'encoder'}: calibration clips are {calib.clip_shape}, "
            f"the encoder expects {expected}"
        )

    def run(clip: Matrix) -> Dict[TapPoint, Matrix]:
        _, acts = forward_with_taps(spec, weights, clip, taps)
        for tap in taps:
            if not np.all(np.isfinite(acts[tap])):
                raise DataError("non-finite activations", tap=tap)
        return acts

    workers = workers or config.THREADS
    logger.info("calibrating %d taps over %d clips (%d workers)", len(taps), calib.n_calib, workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            activations = list(pool.map(run, calib.clips))
    else:
        activations = [run(clip) for clip in calib.clips]

    stats = {}
    for tap in taps:
        mean, scatter, count = pooled_scatter([acts[tap] for acts in activations])
        eig = sym_eig(scatter)
        stats[tap] = ActivationStats(
            tap=tap,
            mean=mean,
            eigenvalues=eig.eigenvalues,
            basis=eig.eigenvectors,
            sample_count=count,
        )
        logger.debug("%s: top eigenvalue %.4e over %d samples", tap, eig.eigenvalues[0], count)
    return stats


def spectrum_summary(stats: ActivationStats, top: int = 8) -> List[float]:
    """Leading eigenvalues normalized by their total."""
    return [float(x) for x in stats.normalized_spectrum()[:top]]


def tail_energy(stats: ActivationStats, k: int) -> float:
    """Σ_{i>k} λ_i: the squared Frobenius error of projecting the centered
    calibration activations onto the top-k directions."""
    return float(stats.eigenvalues[k:].sum())
