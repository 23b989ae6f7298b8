"""Conversion of weights, calibration clips, statistics and compressed encoders
to and from LRTA0001 archives.

Tensor names:

    pos_emb                                   positional embedding
    stem.conv1.weight, stem.conv1.bias, ...   conv stem, when present
    {i}.ln1.gain, {i}.ln1.bias, {i}.ln2.*     block layernorms
    {i}.{site}.weight, {i}.{site}.bias        dense linear layer
    {i}.{site}.w_down, .w_up, .bias           factorized linear layer
    final.gain, final.bias                    post-stack layernorm, when present
    {i}.{site}.mean, .eigvals, .basis         activation statistics
    clips                                     calibration set, n × rows × cols

The metadata `kind` is one of weights, calib, stats, compressed; weight-like
archives also carry the encoder spec.
"""

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from lrse.algorithm.calib import ActivationStats
from lrse.algorithm.compress import CompressedEncoder
from lrse.algorithm.encoder import ConvStem, EncoderWeights, LayerWeights
from lrse.algorithm.layers import DenseLinear, FactorizedLinear, Linear
from lrse.errors import DataError, ManifestError, UsageError
from lrse.schemas import SITES, EncoderSpec, RankDecision, TapPoint
from lrse.storage.archive import TensorArchive, load_archive, save_archive
from lrse.storage.calib_data import CalibSet

logger = logging.getLogger(__name__)

WEIGHTS = "weights"
CALIB = "calib"
STATS = "stats"
COMPRESSED = "compressed"


def _tensor(archive: TensorArchive, name: str) -> np.ndarray:
    """Reads a tensor widened to float64; rejects non-finite entries."""
    values = np.asarray(archive[name], dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"tensor {name!r} holds non-finite values")
    return values


def _expect_kind(archive: TensorArchive, *kinds: str) -> str:
    kind = archive.metadata.get("kind")
    if kind not in kinds:
        raise ManifestError(f"expected a {' or '.join(kinds)} archive, got kind {kind!r}")
    return kind


def _spec(archive: TensorArchive) -> EncoderSpec:
    try:
        return EncoderSpec.model_validate(archive.metadata["spec"])
    except (KeyError, ValueError) as e:
        raise ManifestError(f"archive carries no valid encoder spec: {e}") from None


def _linear_tensors(prefix: str, linear: Linear) -> Dict[str, np.ndarray]:
    if isinstance(linear, FactorizedLinear):
        return {f"{prefix}.w_down": linear.w_down, f"{prefix}.w_up": linear.w_up, f"{prefix}.bias": linear.bias}
    return {f"{prefix}.weight": linear.weight, f"{prefix}.bias": linear.bias}


def _read_linear(archive: TensorArchive, prefix: str) -> Linear:
    if f"{prefix}.w_down" in archive:
        return FactorizedLinear(
            w_down=_tensor(archive, f"{prefix}.w_down"),
            w_up=_tensor(archive, f"{prefix}.w_up"),
            bias=_tensor(archive, f"{prefix}.bias"),
        )
    return DenseLinear(weight=_tensor(archive, f"{prefix}.weight"), bias=_tensor(archive, f"{prefix}.bias"))


def weights_to_tensors(weights: EncoderWeights) -> Dict[str, np.ndarray]:
    tensors = {"pos_emb": weights.pos_emb}
    if weights.stem is not None:
        stem = weights.stem
        tensors.update(
            {
                "stem.conv1.weight": stem.conv1_weight,
                "stem.conv1.bias": stem.conv1_bias,
                "stem.conv2.weight": stem.conv2_weight,
                "stem.conv2.bias": stem.conv2_bias,
            }
        )
    for i, layer in enumerate(weights.layers):
        tensors[f"{i}.ln1.gain"] = layer.ln1_gain
        tensors[f"{i}.ln1.bias"] = layer.ln1_bias
        tensors[f"{i}.ln2.gain"] = layer.ln2_gain
        tensors[f"{i}.ln2.bias"] = layer.ln2_bias
        for site in SITES:
            tensors.update(_linear_tensors(f"{i}.{site.value}", layer.linear(site)))
    if weights.final_gain is not None:
        tensors["final.gain"] = weights.final_gain
        tensors["final.bias"] = weights.final_bias
    return tensors


def weights_from_archive(archive: TensorArchive) -> EncoderWeights:
    """Rebuilds encoder weights, dense or partly factorized.

    Raises:
        ManifestError: If the EncoderSpec or a tensor is missing.
        DataError: If a tensor holds non-finite values.
        ShapeError: If tensors do not match the EncoderSpec.
    """
    spec = _spec(archive)
    layers = []
    for i in range(spec.n_layers):
        linears = {site.value: _read_linear(archive, f"{i}.{site.value}") for site in SITES}
        layers.append(
            LayerWeights(
                ln1_gain=_tensor(archive, f"{i}.ln1.gain"),
                ln1_bias=_tensor(archive, f"{i}.ln1.bias"),
                ln2_gain=_tensor(archive, f"{i}.ln2.gain"),
                ln2_bias=_tensor(archive, f"{i}.ln2.bias"),
                **linears,
            )
        )
    stem = None
    if spec.has_conv_stem:
        stem = ConvStem(
            conv1_weight=_tensor(archive, "stem.conv1.weight"),
            conv1_bias=_tensor(archive, "stem.conv1.bias"),
            conv2_weight=_tensor(archive, "stem.conv2.weight"),
            conv2_bias=_tensor(archive, "stem.conv2.bias"),
        )
    final_gain = final_bias = None
    if spec.final_norm:
        final_gain, final_bias = _tensor(archive, "final.gain"), _tensor(archive, "final.bias")
    return EncoderWeights(
        spec=spec,
        layers=tuple(layers),
        pos_emb=_tensor(archive, "pos_emb"),
        stem=stem,
        final_gain=final_gain,
        final_bias=final_bias,
    )


def save_weights(path, weights: EncoderWeights, seed: Optional[int] = None) -> None:
    metadata = {"kind": WEIGHTS, "spec": weights.spec.model_dump(mode="json")}
    if seed is not None:
        metadata["seed"] = seed
    save_archive(path, weights_to_tensors(weights), metadata)


def load_weights(path) -> EncoderWeights:
    """Loads a weights archive. A compressed archive is accepted too; its
    factorized layers are kept as they are."""
    archive = load_archive(path)
    _expect_kind(archive, WEIGHTS, COMPRESSED)
    return weights_from_archive(archive)


def save_calib(path, calib: CalibSet, metadata: Optional[dict] = None) -> None:
    if calib.n_calib == 0:
        raise UsageError("refusing to store an empty calibration set")
    save_archive(path, {"clips": calib.stacked()}, {**(metadata or {}), "kind": CALIB})


def load_calib(path) -> CalibSet:
    archive = load_archive(path)
    _expect_kind(archive, CALIB)
    clips = _tensor(archive, "clips")
    if clips.ndim != 3:
        raise ManifestError(f"clips tensor must be 3-D, got shape {clips.shape}")
    return CalibSet(tuple(clips[i] for i in range(clips.shape[0])))


def save_stats(path, spec: EncoderSpec, stats: Dict[TapPoint, ActivationStats]) -> None:
    tensors = {}
    counts = {}
    for tap, st in stats.items():
        tensors[f"{tap}.mean"] = st.mean
        tensors[f"{tap}.eigvals"] = st.eigenvalues
        tensors[f"{tap}.basis"] = st.basis
        counts[str(tap)] = st.sample_count
    metadata = {"kind": STATS, "spec": spec.model_dump(mode="json"), "sample_counts": counts}
    save_archive(path, tensors, metadata)


def load_stats(path) -> Tuple[EncoderSpec, Dict[TapPoint, ActivationStats]]:
    """Loads statistics together with the EncoderSpec of the encoder they came from."""
    archive = load_archive(path)
    _expect_kind(archive, STATS)
    spec = _spec(archive)
    counts = archive.metadata.get("sample_counts")
    if not isinstance(counts, dict):
        raise ManifestError("stats archive has no sample_counts")
    stats = {}
    for key, count in counts.items():
        try:
            tap = TapPoint.parse(key)
        except ValueError:
            raise ManifestError(f"invalid tap name {key!r}") from None
        stats[tap] = ActivationStats(
            tap=tap,
            mean=_tensor(archive, f"{key}.mean"),
            eigenvalues=_tensor(archive, f"{key}.eigvals"),
            basis=_tensor(archive, f"{key}.basis"),
            sample_count=int(count),
        )
    return spec, stats


def save_compressed(path, compressed: CompressedEncoder) -> None:
    metadata = {
        "kind": COMPRESSED,
        "spec": compressed.spec.model_dump(mode="json"),
        "decisions": [d.model_dump(mode="json") for d in compressed.decisions],
    }
    save_archive(path, weights_to_tensors(compressed.weights), metadata)


def load_compressed(path) -> CompressedEncoder:
    """Loads a compressed encoder; attention paths are re-derived from its ranks.

    Raises:
        ManifestError: If decisions are missing or inconsistent with the tensors.
    """
    archive = load_archive(path)
    _expect_kind(archive, COMPRESSED)
    weights = weights_from_archive(archive)
    try:
        decisions = [RankDecision.model_validate(d) for d in archive.metadata["decisions"]]
        return CompressedEncoder.assemble(weights, decisions)
    except (KeyError, TypeError, ValueError, UsageError) as e:
        raise ManifestError(f"invalid rank decisions: {e}") from None
