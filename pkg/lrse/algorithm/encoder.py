"""Whisper-style Transformer encoder: weights, forward pass and activation taps.

Blocks are pre-norm: x += Attn(LN(x)); x += MLP(LN(x)). An optional
convolution front end reduces 2·L input frames to L before the sinusoidal
positional embedding is added.
"""

import dataclasses
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np

from lrse.algorithm.fastattn import FactorizedAttnParams, attention_block
from lrse.algorithm.layers import DenseLinear, Linear
from lrse.algorithm.linalg import Matrix, Vector, as_matrix, gelu, layernorm, matmul
from lrse.errors import RangeError, ShapeError, UsageError
from lrse.schemas import SITES, AttnPath, EncoderSpec, Site, TapPoint, ordered

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerWeights:
    """Parameters of one encoder block."""

    ln1_gain: Vector
    ln1_bias: Vector
    q_proj: Linear
    k_proj: Linear
    v_proj: Linear
    out_proj: Linear
    ln2_gain: Vector
    ln2_bias: Vector
    fc1: Linear
    fc2: Linear

    def linear(self, site: Site) -> Linear:
        return getattr(self, site.value)

    def attention_params(self, n_heads: int) -> FactorizedAttnParams:
        return FactorizedAttnParams(self.q_proj, self.k_proj, self.v_proj, self.out_proj, n_heads)


@dataclass(frozen=True)
class ConvStem:
    """Two 1-D convolutions (kernel 3, padding 1; the second with stride 2).

    Weights use the (out_channels, in_channels, kernel) layout.
    """

    conv1_weight: np.ndarray
    conv1_bias: Vector
    conv2_weight: np.ndarray
    conv2_bias: Vector

    @property
    def n_params(self) -> int:
        return sum(t.size for t in (self.conv1_weight, self.conv1_bias, self.conv2_weight, self.conv2_bias))

    def apply(self, x: Matrix) -> Matrix:
        x = gelu(conv1d(x, self.conv1_weight, self.conv1_bias, stride=1))
        return gelu(conv1d(x, self.conv2_weight, self.conv2_bias, stride=2))


@dataclass(frozen=True)
class EncoderWeights:
    """All parameter tensors of an encoder.

    Attributes:
        spec (EncoderSpec): Architecture the tensors belong to.
        layers (Tuple[LayerWeights, ...]): One entry per block.
        pos_emb (Matrix): seq_len × d_model positional embedding.
        stem (ConvStem | None): Present iff spec.has_conv_stem.
        final_gain (Vector | None): Post-stack layernorm gain, present iff spec.final_norm.
        final_bias (Vector | None): Post-stack layernorm bias.
    """

    spec: EncoderSpec
    layers: Tuple[LayerWeights, ...]
    pos_emb: Matrix
    stem: Optional[ConvStem] = None
    final_gain: Optional[Vector] = None
    final_bias: Optional[Vector] = None

    def __post_init__(self):
        spec = self.spec
        if len(self.layers) != spec.n_layers:
            raise ShapeError(f"spec has {spec.n_layers} layers, weights have {len(self.layers)}")
        if self.pos_emb.shape != (spec.seq_len, spec.d_model):
            raise ShapeError(f"positional embedding {self.pos_emb.shape} does not match spec")
        if (self.stem is not None) != spec.has_conv_stem:
            raise ShapeError("conv stem presence does not match spec")
        if (self.final_gain is not None) != spec.final_norm:
            raise ShapeError("final layernorm presence does not match spec")
        for i, layer in enumerate(self.layers):
            for site in SITES:
                linear = layer.linear(site)
                if (linear.d_in, linear.d_out) != spec.site_dims(site):
                    raise ShapeError(
                        f"{i}.{site.value} is {linear.d_in}×{linear.d_out}, "
                        f"spec wants {spec.site_dims(site)}"
                    )
            for vec in (layer.ln1_gain, layer.ln1_bias, layer.ln2_gain, layer.ln2_bias):
                if vec.shape != (spec.d_model,):
                    raise ShapeError(f"layer {i} layernorm has shape {vec.shape}")

    def linear(self, tap: TapPoint) -> Linear:
        if tap.layer_index >= self.spec.n_layers:
            raise RangeError(f"tap {tap} references a layer beyond {self.spec.n_layers}")
        return self.layers[tap.layer_index].linear(tap.site)

    def with_linears(self, replacements: Mapping[TapPoint, Linear]) -> "EncoderWeights":
        """Copy with the given linear layers swapped in; other tensors are shared."""
        if not replacements:
            return self
        layers = list(self.layers)
        for tap, linear in replacements.items():
            layers[tap.layer_index] = dataclasses.replace(
                layers[tap.layer_index], **{tap.site.value: linear}
            )
        return dataclasses.replace(self, layers=tuple(layers))

    def non_linear_param_count(self) -> int:
        """Layernorms and conv stem; the positional embedding is a buffer."""
        count = 4 * self.spec.d_model * self.spec.n_layers
        if self.stem is not None:
            count += self.stem.n_params
        if self.final_gain is not None:
            count += 2 * self.spec.d_model
        return count

    def param_count(self) -> int:
        linears = sum(layer.linear(site).n_params for layer in self.layers for site in SITES)
        return linears + self.non_linear_param_count()


def conv1d(x: Matrix, weight: np.ndarray, bias: Vector, stride: int = 1) -> Matrix:
    """1-D convolution over time with kernel 3 and zero padding 1.

    Args:
        x (Matrix): T × C_in.
        weight (np.ndarray): C_out × C_in × 3.
        bias (Vector): C_out.
        stride (int): Step between output frames.

    Returns:
        Matrix: T_out × C_out with T_out = (T − 1) // stride + 1.
    """
    c_out, c_in, width = weight.shape
    if x.shape[1] != c_in:
        raise ShapeError(f"conv expects {c_in} channels, got {x.shape[1]}")
    padded = np.pad(x, ((1, 1), (0, 0)))
    n_out = (x.shape[0] - 1) // stride + 1
    windows = np.stack([padded[t * stride : t * stride + width].reshape(-1) for t in range(n_out)])
    kernel = weight.transpose(2, 1, 0).reshape(width * c_in, c_out)
    return matmul(windows, kernel) + bias


def sinusoids(length: int, channels: int, max_timescale: float = 10000.0) -> Matrix:
    """Whisper's sinusoidal positional embedding: sines then cosines."""
    half = channels // 2
    increment = np.log(max_timescale) / max(half - 1, 1)
    inv_timescales = np.exp(-increment * np.arange(half))
    scaled = np.arange(length)[:, None] * inv_timescales[None, :]
    emb = np.concatenate([np.sin(scaled), np.cos(scaled)], axis=1)
    if channels % 2:
        emb = np.pad(emb, ((0, 0), (0, 1)))
    return emb


def _check_taps(spec: EncoderSpec, taps: Iterable[TapPoint]) -> None:
    for tap in taps:
        if tap.layer_index >= spec.n_layers:
            raise RangeError(f"tap {tap} references a layer beyond {spec.n_layers}")


AttentionProbe = Callable[[int, Matrix, FactorizedAttnParams], None]


def encode(
    spec: EncoderSpec,
    weights: EncoderWeights,
    x: Matrix,
    paths: Optional[Sequence[AttnPath]] = None,
    taps: Optional[Iterable[TapPoint]] = None,
    on_attention: Optional[AttentionProbe] = None,
) -> Tuple[Matrix, Dict[TapPoint, Matrix]]:
    """Runs the encoder, optionally recording tapped linear outputs.

    Args:
        spec (EncoderSpec): Architecture.
        weights (EncoderWeights): Parameters; linears may be dense or factorized.
        x (Matrix): input_len × d_input features.
        paths (Sequence[AttnPath] | None): Attention path per block; standard when omitted.
        taps (Iterable[TapPoint] | None): Linear outputs to record.
        on_attention (callable | None): Called with (layer, normalized input,
            attention factors) before each attention block.

    Returns:
        tuple: Final hidden states (seq_len × d_model) and the recorded taps.

    Raises:
        ShapeError: If the input or the weights do not match `spec`.
        RangeError: If a tap references a missing layer.
    """
    if weights.spec != spec:
        raise ShapeError("weights were built for a different encoder spec")
    x = as_matrix(x, "encoder input")
    if x.shape != (spec.input_len, spec.d_input):
        raise ShapeError(f"input shape {x.shape} does not match ({spec.input_len}, {spec.d_input})")
    wanted = set(taps or ())
    _check_taps(spec, wanted)

    if weights.stem is not None:
        x = weights.stem.apply(x)
    x = x + weights.pos_emb

    recorded: Dict[TapPoint, Matrix] = {}
    for i, layer in enumerate(weights.layers):
        path = paths[i] if paths is not None else AttnPath.standard()
        record = {} if any(t.layer_index == i for t in wanted) else None

        h = layernorm(x, layer.ln1_gain, layer.ln1_bias, spec.ln_eps)
        params = layer.attention_params(spec.n_heads)
        if on_attention is not None:
            on_attention(i, h, params)
        x = x + attention_block(h, params, path, record)

        h = layernorm(x, layer.ln2_gain, layer.ln2_bias, spec.ln_eps)
        y1 = layer.fc1.apply(h)
        y2 = layer.fc2.apply(gelu(y1))
        x = x + y2

        if record is not None:
            record[Site.FC1] = y1
            record[Site.FC2] = y2
            for site, y in record.items():
                tap = TapPoint(layer_index=i, site=site)
                if tap in wanted:
                    recorded[tap] = y

    if weights.final_gain is not None:
        x = layernorm(x, weights.final_gain, weights.final_bias, spec.ln_eps)

    missing = wanted - recorded.keys()
    if missing:
        raise UsageError(f"taps {sorted(map(str, missing))} are not materialized on this path")
    return x, recorded


def forward(spec: EncoderSpec, weights: EncoderWeights, x: Matrix) -> Matrix:
    """Final hidden states of the encoder."""
    return encode(spec, weights, x)[0]


def forward_with_taps(
    spec: EncoderSpec, weights: EncoderWeights, x: Matrix, taps: Iterable[TapPoint]
) -> Tuple[Matrix, Dict[TapPoint, Matrix]]:
    """Final hidden states plus the post-bias, pre-activation output Y = X·W + b
    of every requested linear layer."""
    return encode(spec, weights, x, taps=ordered(taps))


def synth_weights(spec: EncoderSpec, seed: int, weight_rank: Optional[int] = None) -> EncoderWeights:
    """Reproducible pseudo-random weights with entries of standard deviation 1/√fan_in.

    Args:
        spec (EncoderSpec): Architecture.
        seed (int): RNG seed; equal (spec, seed, weight_rank) give bit-identical weights.
        weight_rank (int | None): When set, every linear weight is a product
            P·Q of this inner dimension, so every tap is exactly low-rank.

    Returns:
        EncoderWeights: Dense weights with sinusoidal positional embedding.
    """
    if weight_rank is not None and weight_rank < 1:
        raise RangeError(f"weight_rank must be positive, got {weight_rank}")
    rng = np.random.default_rng(seed)

    def dense(d_in: int, d_out: int) -> DenseLinear:
        if weight_rank is None or weight_rank >= min(d_in, d_out):
            w = rng.standard_normal((d_in, d_out)) / np.sqrt(d_in)
        else:
            p = rng.standard_normal((d_in, weight_rank))
            q = rng.standard_normal((weight_rank, d_out))
            w = matmul(p, q) / np.sqrt(d_in * weight_rank)
        b = rng.standard_normal(d_out) / np.sqrt(d_in)
        return DenseLinear(weight=w, bias=b)

    def norm(width: int) -> Tuple[Vector, Vector]:
        return 1.0 + 0.1 * rng.standard_normal(width), 0.1 * rng.standard_normal(width)

    d = spec.d_model
    layers = []
    for _ in range(spec.n_layers):
        ln1_gain, ln1_bias = norm(d)
        ln2_gain, ln2_bias = norm(d)
        layers.append(
            LayerWeights(
                ln1_gain=ln1_gain,
                ln1_bias=ln1_bias,
                q_proj=dense(*spec.site_dims(Site.Q_PROJ)),
                k_proj=dense(*spec.site_dims(Site.K_PROJ)),
                v_proj=dense(*spec.site_dims(Site.V_PROJ)),
                out_proj=dense(*spec.site_dims(Site.OUT_PROJ)),
                ln2_gain=ln2_gain,
                ln2_bias=ln2_bias,
                fc1=dense(*spec.site_dims(Site.FC1)),
                fc2=dense(*spec.site_dims(Site.FC2)),
            )
        )

    stem = None
    if spec.has_conv_stem:
        stem = ConvStem(
            conv1_weight=rng.standard_normal((d, spec.n_mels, 3)) / np.sqrt(3 * spec.n_mels),
            conv1_bias=rng.standard_normal(d) / np.sqrt(3 * spec.n_mels),
            conv2_weight=rng.standard_normal((d, d, 3)) / np.sqrt(3 * d),
            conv2_bias=rng.standard_normal(d) / np.sqrt(3 * d),
        )
    final_gain = final_bias = None
    if spec.final_norm:
        final_gain, final_bias = norm(d)

    logger.debug("synthesized weights: %s seed=%d weight_rank=%s", spec, seed, weight_rank)
    return EncoderWeights(
        spec=spec,
        layers=tuple(layers),
        pos_emb=sinusoids(spec.seq_len, d),
        stem=stem,
        final_gain=final_gain,
        final_bias=final_bias,
    )
