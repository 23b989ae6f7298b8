"""Calibration clip sets and the synthetic low-rank-plus-noise generator."""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from lrse.algorithm.linalg import Matrix, matmul
from lrse.errors import RangeError, ShapeError
from lrse.schemas import EncoderSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CalibSet:
    """Calibration inputs, every clip an input_len × d_input feature matrix."""

    clips: Tuple[Matrix, ...]

    def __post_init__(self):
        shapes = {clip.shape for clip in self.clips}
        if len(shapes) > 1:
            raise ShapeError(f"calibration clips differ in shape: {sorted(shapes)}")

    @property
    def n_calib(self) -> int:
        return len(self.clips)

    @property
    def clip_shape(self) -> Optional[Tuple[int, int]]:
        return self.clips[0].shape if self.clips else None

    def stacked(self) -> np.ndarray:
        """All clips as one n_calib × rows × cols array."""
        return np.stack(self.clips)


def synth_calib(
    spec: EncoderSpec,
    n_calib: int,
    effective_rank: int,
    noise: float = 0.0,
    seed: int = 0,
    basis_seed: Optional[int] = None,
) -> CalibSet:
    """Low-rank-plus-noise feature clips.

    Each clip is F·B + noise·G, with F an input_len × r Gaussian factor drawn
    per clip, B an r × d_input basis shared by all clips, and G Gaussian noise.

    Args:
        spec (EncoderSpec): Determines clip shape.
        n_calib (int): Number of clips.
        effective_rank (int): Inner dimension r of the shared basis.
        noise (float): Standard deviation of the additive noise.
        seed (int): Seed of the per-clip factors and noise.
        basis_seed (int | None): Seed of the shared basis; `seed` when omitted.
            Reusing it with another `seed` draws held-out clips from the same
            subspace.

    Returns:
        CalibSet: Deterministic for equal arguments.

    Raises:
        RangeError: If the rank exceeds the feature width or a count is not positive.
    """
    d = spec.d_input
    if not 1 <= effective_rank <= d:
        raise RangeError(f"effective rank {effective_rank} outside [1, {d}]")
    if n_calib < 1:
        raise RangeError(f"n_calib must be positive, got {n_calib}")

    basis_rng = np.random.default_rng((seed if basis_seed is None else basis_seed, 0))
    basis = basis_rng.standard_normal((effective_rank, d)) / np.sqrt(effective_rank)
    rng = np.random.default_rng((seed, 1))
    clips = []
    for _ in range(n_calib):
        factor = rng.standard_normal((spec.input_len, effective_rank))
        clips.append(matmul(factor, basis) + noise * rng.standard_normal((spec.input_len, d)))
    logger.debug("synthesized %d clips, rank %d, noise %g", n_calib, effective_rank, noise)
    return CalibSet(tuple(clips))
