"""Import of Whisper encoder checkpoints exported as `.npz` state dicts.

Name mapping (an optional leading `encoder.` is ignored):

    conv1.weight / conv1.bias                 stem.conv1.*
    conv2.weight / conv2.bias                 stem.conv2.*
    positional_embedding                      pos_emb
    blocks.{i}.attn_ln.weight / .bias         {i}.ln1.gain / .bias
    blocks.{i}.attn.query.weight / .bias      {i}.q_proj
    blocks.{i}.attn.key.weight                {i}.k_proj (zero bias)
    blocks.{i}.attn.value.weight / .bias      {i}.v_proj
    blocks.{i}.attn.out.weight / .bias        {i}.out_proj
    blocks.{i}.mlp_ln.weight / .bias          {i}.ln2.gain / .bias
    blocks.{i}.mlp.0.weight / .bias           {i}.fc1
    blocks.{i}.mlp.2.weight / .bias           {i}.fc2
    ln_post.weight / .bias                    final.gain / .bias

PyTorch stores linear weights as (out, in); they are transposed to the
(in, out) layout used here.
"""

import logging
import re
from pathlib import Path
from typing import Mapping

import numpy as np

from lrse.algorithm.encoder import ConvStem, EncoderWeights, LayerWeights
from lrse.algorithm.layers import DenseLinear
from lrse.errors import DataError, ManifestError
from lrse.schemas import EncoderSpec, Site

logger = logging.getLogger(__name__)

PREFIX = "encoder."

LINEAR_NAMES = {
    Site.Q_PROJ: "attn.query",
    Site.K_PROJ: "attn.key",
    Site.V_PROJ: "attn.value",
    Site.OUT_PROJ: "attn.out",
    Site.FC1: "mlp.0",
    Site.FC2: "mlp.2",
}

_BLOCK = re.compile(r"blocks\.(\d+)\.")


def _strip(state: Mapping[str, np.ndarray]) -> dict:
    return {(k[len(PREFIX):] if k.startswith(PREFIX) else k): v for k, v in state.items()}


def infer_spec(state: Mapping[str, np.ndarray], n_heads: int) -> EncoderSpec:
    """Reads the architecture off tensor shapes; the head count is not
    recoverable from them and must be given."""
    state = _strip(state)
    try:
        d_model, n_mels, _ = state["conv1.weight"].shape
        seq_len = state["positional_embedding"].shape[0]
        d_ff = state["blocks.0.mlp.0.weight"].shape[0]
    except KeyError as e:
        raise ManifestError(f"checkpoint lacks tensor {e}") from None
    n_layers = len({int(m.group(1)) for k in state if (m := _BLOCK.match(k))})
    return EncoderSpec(
        n_layers=n_layers,
        d_model=d_model,
        n_heads=n_heads,
        d_ff=d_ff,
        seq_len=seq_len,
        has_conv_stem=True,
        n_mels=n_mels,
        final_norm=True,
    )


def convert_state_dict(state: Mapping[str, np.ndarray], n_heads: int) -> EncoderWeights:
    """Maps a Whisper encoder state dict onto encoder weights.

    Raises:
        ManifestError: If a mapped tensor is missing.
        DataError: If a tensor holds non-finite values.
        ShapeError: If tensor shapes disagree with each other.
    """
    state = _strip(state)
    spec = infer_spec(state, n_heads)

    def get(name: str) -> np.ndarray:
        try:
            values = np.asarray(state[name], dtype=np.float64)
        except KeyError:
            raise ManifestError(f"checkpoint lacks tensor {name!r}") from None
        if not np.all(np.isfinite(values)):
            raise DataError(f"tensor {name!r} holds non-finite values")
        return values

    def linear(block: int, site: Site) -> DenseLinear:
        prefix = f"blocks.{block}.{LINEAR_NAMES[site]}"
        weight = get(f"{prefix}.weight").T
        if site is Site.K_PROJ and f"{prefix}.bias" not in state:
            bias = np.zeros(weight.shape[1])
        else:
            bias = get(f"{prefix}.bias")
        return DenseLinear(weight=np.ascontiguousarray(weight), bias=bias)

    layers = []
    for i in range(spec.n_layers):
        layers.append(
            LayerWeights(
                ln1_gain=get(f"blocks.{i}.attn_ln.weight"),
                ln1_bias=get(f"blocks.{i}.attn_ln.bias"),
                ln2_gain=get(f"blocks.{i}.mlp_ln.weight"),
                ln2_bias=get(f"blocks.{i}.mlp_ln.bias"),
                **{site.value: linear(i, site) for site in LINEAR_NAMES},
            )
        )
    stem = ConvStem(
        conv1_weight=get("conv1.weight"),
        conv1_bias=get("conv1.bias"),
        conv2_weight=get("conv2.weight"),
        conv2_bias=get("conv2.bias"),
    )
    logger.info(
        "imported %d-layer encoder: d_model=%d heads=%d d_ff=%d L=%d",
        spec.n_layers,
        spec.d_model,
        spec.n_heads,
        spec.d_ff,
        spec.seq_len,
    )
    return EncoderWeights(
        spec=spec,
        layers=tuple(layers),
        pos_emb=get("positional_embedding"),
        stem=stem,
        final_gain=get("ln_post.weight"),
        final_bias=get("ln_post.bias"),
    )


def import_whisper(path, n_heads: int) -> EncoderWeights:
    with np.load(Path(path)) as npz:
        state = {name: npz[name] for name in npz.files}
    return convert_state_dict(state, n_heads)
