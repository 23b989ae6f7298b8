"""Rank selection and rewriting of dense layers into their PCA-factorized form.

A layer Y = X·W + b whose centered calibration outputs concentrate in the
top-k principal directions V_k is replaced by

    Y ≈ (X·W + b − Y_M)·V_k·V_kᵀ + Y_M = X·(W·V_k)·V_kᵀ + (Y_M + (b − Y_M)·V_k·V_kᵀ)

which is cheaper than the dense product whenever k·(D_in + D_out) < D_in·D_out.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from lrse.algorithm import flops
from lrse.algorithm.calib import ActivationStats
from lrse.algorithm.encoder import EncoderWeights, encode
from lrse.algorithm.fastattn import FactorizedAttnParams, attention_block, select_path
from lrse.algorithm.layers import DenseLinear, FactorizedLinear, Linear
from lrse.algorithm.linalg import Matrix, Vector, matmul
from lrse.errors import RangeError, ShapeError, UsageError
from lrse.schemas import (
    AttnPath,
    EncoderSpec,
    RankDecision,
    RankPolicy,
    ScorePath,
    TapPoint,
    ValuePath,
)

__all__ = [
    "CompressedEncoder",
    "FactorizedLinear",
    "compress_encoder",
    "factorize_layer",
    "forward_compressed",
    "path_residuals",
    "select_rank",
]

logger = logging.getLogger(__name__)


def select_rank(
    eigenvalues: Vector,
    d_in: int,
    d_out: int,
    theta: float,
    granularity: int = 16,
    tap: Optional[TapPoint] = None,
) -> RankDecision:
    """Smallest multiple of `granularity` whose leading eigenvalues strictly
    exceed a θ share of the total, or Dense when that rank is not cheaper than
    the dense layer.

    Args:
        eigenvalues (Vector): Scatter eigenvalues of the layer output, descending.
        d_in (int): Input width.
        d_out (int): Output width; candidate ranks never exceed it.
        theta (float): Variance threshold in (0, 1].
        granularity (int): Rank step.
        tap (TapPoint | None): Recorded on the decision.

    Returns:
        RankDecision: The selected rank or a dense fallback.

    Raises:
        RangeError: If theta or granularity are out of range, or the spectrum
            is negative, unsorted or of the wrong length.
    """
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if not 0.0 < theta <= 1.0:
        raise RangeError(f"theta must lie in (0, 1], got {theta}")
    if granularity < 1:
        raise RangeError(f"granularity must be positive, got {granularity}")
    if lam.shape != (d_out,):
        raise RangeError(f"expected {d_out} eigenvalues, got shape {lam.shape}")
    if np.any(lam < 0.0) or np.any(np.diff(lam) > 0.0):
        raise RangeError("eigenvalues must be non-negative and descending")

    cap = flops.efficiency_cap(d_in, d_out)
    fields = dict(tap=tap, efficiency_cap=cap, theta_used=theta, granularity=granularity, d_in=d_in, d_out=d_out)

    cumulative = np.cumsum(lam)
    total = cumulative[-1]
    if total <= 0.0:
        # constant activations: the folded bias carries them exactly
        k_required = granularity if theta < 1.0 and granularity <= d_out else None
        k = k_required if k_required is not None and k_required <= cap else None
        return RankDecision(k=k, variance_captured=1.0, k_required=k_required, **fields)

    k_required = None
    for k in range(granularity, d_out + 1, granularity):
        if cumulative[k - 1] > theta * total:
            k_required = k
            break

    if k_required is None or k_required > cap:
        return RankDecision(k=None, variance_captured=1.0, k_required=k_required, **fields)
    captured = min(float(cumulative[k_required - 1] / total), 1.0)
    return RankDecision(k=k_required, variance_captured=captured, k_required=k_required, **fields)


def factorize_layer(weight: Matrix, bias: Vector, stats: ActivationStats, k: int) -> FactorizedLinear:
    """Builds w_down = W·V_k, w_up = V_kᵀ and the folded bias Y_M + (b − Y_M)·V_k·V_kᵀ.

    Raises:
        ShapeError: If W, b and the statistics disagree in width.
        RangeError: If k is not in [1, D_out].
    """
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if weight.ndim != 2 or bias.shape != (weight.shape[1],):
        raise ShapeError(f"weight {weight.shape} does not match bias {bias.shape}")
    d_out = weight.shape[1]
    if stats.mean.shape != (d_out,) or stats.basis.shape != (d_out, d_out):
        raise ShapeError(f"{stats.tap}: statistics of width {stats.mean.size} for a layer of width {d_out}")
    if not 1 <= k <= d_out:
        raise RangeError(f"{stats.tap}: rank {k} outside [1, {d_out}]")

    v_k = stats.basis[:, :k]
    folded = stats.mean + matmul((bias - stats.mean)[None, :], stats.projector(k))[0]
    return FactorizedLinear(w_down=matmul(weight, v_k), w_up=np.ascontiguousarray(v_k.T), bias=folded)


def _layer_paths(spec: EncoderSpec, weights: EncoderWeights) -> Tuple[AttnPath, ...]:
    return tuple(
        select_path(spec.seq_len, spec.d_head, layer.q_proj.rank, layer.k_proj.rank, layer.v_proj.rank)
        for layer in weights.layers
    )


@dataclass(frozen=True)
class CompressedEncoder:
    """An encoder whose linear layers are each either dense or factorized.

    Attributes:
        spec (EncoderSpec): Architecture.
        weights (EncoderWeights): Weights with factorized layers swapped in.
        decisions (Tuple[RankDecision, ...]): One per tap, in tap order.
        paths (Tuple[AttnPath, ...]): Attention computation path per block.
    """

    spec: EncoderSpec
    weights: EncoderWeights
    decisions: Tuple[RankDecision, ...]
    paths: Tuple[AttnPath, ...]

    @classmethod
    def assemble(cls, weights: EncoderWeights, decisions: Sequence[RankDecision]) -> "CompressedEncoder":
        """Validates decisions against the layers and picks attention paths.

        Raises:
            UsageError: If decisions do not cover every tap exactly once or
                disagree with the layer representations.
        """
        spec = weights.spec
        by_tap = {d.tap: d for d in decisions}
        expected = spec.all_taps()
        if len(by_tap) != len(decisions) or set(by_tap) != set(expected):
            raise UsageError("rank decisions must cover every tap exactly once")
        for tap in expected:
            linear, decision = weights.linear(tap), by_tap[tap]
            if decision.is_dense != isinstance(linear, DenseLinear) or (
                not decision.is_dense and linear.rank != decision.k
            ):
                raise UsageError(f"{tap}: decision k={decision.k} does not match the stored layer")
        return cls(
            spec=spec,
            weights=weights,
            decisions=tuple(by_tap[t] for t in expected),
            paths=_layer_paths(spec, weights),
        )

    def decision(self, tap: TapPoint) -> RankDecision:
        for d in self.decisions:
            if d.tap == tap:
                return d
        raise RangeError(f"no decision for tap {tap}")

    def param_count(self) -> int:
        return self.weights.param_count()

    def original_param_count(self) -> int:
        """Parameter count of the dense encoder this one was compressed from."""
        dense = sum(d.d_in * d.d_out + d.d_out for d in self.decisions)
        return dense + self.weights.non_linear_param_count()

    @property
    def n_factorized(self) -> int:
        return sum(not d.is_dense for d in self.decisions)


def compress_encoder(
    weights: EncoderWeights,
    stats: Mapping[TapPoint, ActivationStats],
    policy: RankPolicy,
) -> CompressedEncoder:
    """Selects a rank for every tap and factorizes the layers that get one.

    Attention taps use `policy.theta_attn`, MLP taps `policy.theta_mlp`.

    Raises:
        UsageError: If statistics are missing for a tap or a layer is already factorized.
        ShapeError: If statistics do not match a layer's width.
    """
    spec = weights.spec
    decisions: List[RankDecision] = []
    replacements: Dict[TapPoint, Linear] = {}
    for tap in spec.all_taps():
        if tap not in stats:
            raise UsageError(f"{tap}: no activation statistics")
        linear = weights.linear(tap)
        if not isinstance(linear, DenseLinear):
            raise UsageError(f"{tap}: layer is already factorized")
        st = stats[tap]
        if st.eigenvalues.shape != (linear.d_out,):
            raise ShapeError(f"{tap}: statistics of width {st.eigenvalues.size}, layer width {linear.d_out}")

        decision = select_rank(
            st.eigenvalues, linear.d_in, linear.d_out, policy.theta_for(tap.site), policy.granularity, tap
        )
        decisions.append(decision)
        if not decision.is_dense:
            replacements[tap] = factorize_layer(linear.weight, linear.bias, st, decision.k)
        logger.debug(
            "%s: k=%s (required %s, cap %d) captured %.6f",
            tap,
            decision.k,
            decision.k_required,
            decision.efficiency_cap,
            decision.variance_captured,
        )

    new_weights = weights.with_linears(replacements)
    compressed = CompressedEncoder(
        spec=spec,
        weights=new_weights,
        decisions=tuple(decisions),
        paths=_layer_paths(spec, new_weights),
    )
    n_dense = len(decisions) - compressed.n_factorized
    if n_dense:
        logger.warning("%d of %d taps stay dense", n_dense, len(decisions))
    logger.info(
        "compressed %d taps: %d -> %d parameters",
        compressed.n_factorized,
        compressed.original_param_count(),
        compressed.param_count(),
    )
    return compressed


def forward_compressed(compressed: CompressedEncoder, x: Matrix) -> Matrix:
    """Runs the compressed encoder along its selected attention paths."""
    return encode(compressed.spec, compressed.weights, x, paths=compressed.paths)[0]


_ALTERNATIVE_PATHS = (
    (ScorePath.STANDARD, ValuePath.REORDERED),
    (ScorePath.FACTORIZED, ValuePath.STANDARD),
    (ScorePath.FACTORIZED, ValuePath.REORDERED),
)


def path_residuals(compressed: CompressedEncoder, x: Matrix) -> List[float]:
    """Max deviation, per block, of the three non-standard attention paths from
    the standard one on the activations that input `x` produces."""
    residuals: List[float] = []

    def probe(layer: int, h: Matrix, params: FactorizedAttnParams) -> None:
        reference = attention_block(h, params, AttnPath.standard())
        worst = 0.0
        for score, value in _ALTERNATIVE_PATHS:
            path = AttnPath(score_path=score, value_path=value, score_order=compressed.paths[layer].score_order)
            worst = max(worst, float(np.max(np.abs(attention_block(h, params, path) - reference))))
        residuals.append(worst)

    encode(compressed.spec, compressed.weights, x, paths=compressed.paths, on_attention=probe)
    return residuals
