import numpy as np
import pytest

from lrse import config
from lrse.algorithm.encoder import forward, synth_weights
from lrse.errors import DataError, ManifestError
from lrse.main import main
from lrse.schemas import EncoderSpec, Site
from lrse.storage.model_store import load_weights
from lrse.storage.whisper_import import LINEAR_NAMES, convert_state_dict, import_whisper, infer_spec

SPEC = EncoderSpec(n_layers=2, d_model=8, n_heads=2, d_ff=32, seq_len=6, has_conv_stem=True, n_mels=4, final_norm=True)


def state_dict(weights, prefix=""):
    """Whisper-layout state dict: (out, in) linear weights, no key bias."""
    stem = weights.stem
    state = {
        "conv1.weight": stem.conv1_weight,
        "conv1.bias": stem.conv1_bias,
        "conv2.weight": stem.conv2_weight,
        "conv2.bias": stem.conv2_bias,
        "positional_embedding": weights.pos_emb,
        "ln_post.weight": weights.final_gain,
        "ln_post.bias": weights.final_bias,
    }
    for i, layer in enumerate(weights.layers):
        state[f"blocks.{i}.attn_ln.weight"] = layer.ln1_gain
        state[f"blocks.{i}.attn_ln.bias"] = layer.ln1_bias
        state[f"blocks.{i}.mlp_ln.weight"] = layer.ln2_gain
        state[f"blocks.{i}.mlp_ln.bias"] = layer.ln2_bias
        for site, name in LINEAR_NAMES.items():
            linear = layer.linear(site)
            state[f"blocks.{i}.{name}.weight"] = linear.weight.T.astype(np.float32)
            if site is not Site.K_PROJ:
                state[f"blocks.{i}.{name}.bias"] = linear.bias
    return {prefix + name: values for name, values in state.items()}


@pytest.fixture(scope="module")
def weights():
    return synth_weights(SPEC, seed=4)


def test_infer_spec(weights):
    assert infer_spec(state_dict(weights), n_heads=2) == SPEC
    assert infer_spec(state_dict(weights, "encoder."), n_heads=2) == SPEC


def test_convert_matches_original(weights):
    imported = convert_state_dict(state_dict(weights, "encoder."), n_heads=2)
    for layer, original in zip(imported.layers, weights.layers):
        assert np.array_equal(layer.k_proj.bias, np.zeros(SPEC.d_model))
        np.testing.assert_allclose(layer.fc1.weight, original.fc1.weight, rtol=1e-6, atol=1e-7)
        assert layer.fc1.weight.flags["C_CONTIGUOUS"]
    x = np.random.default_rng(0).standard_normal((2 * SPEC.seq_len, SPEC.n_mels))
    # key biases shift every score in a row equally, so dropping them keeps the output
    np.testing.assert_allclose(forward(SPEC, imported, x), forward(SPEC, weights, x), atol=1e-5)


def test_missing_and_non_finite_tensors(weights):
    state = state_dict(weights)
    del state["blocks.1.mlp.2.bias"]
    with pytest.raises(ManifestError, match="blocks.1.mlp.2.bias"):
        convert_state_dict(state, n_heads=2)

    state = state_dict(weights)
    del state["conv1.weight"]
    with pytest.raises(ManifestError):
        infer_spec(state, n_heads=2)

    state = state_dict(weights)
    state["ln_post.bias"] = np.full(SPEC.d_model, np.inf)
    with pytest.raises(DataError):
        convert_state_dict(state, n_heads=2)


def test_import_from_npz(tmp_path, weights):
    path = tmp_path / "whisper.npz"
    np.savez(path, **state_dict(weights))
    imported = import_whisper(path, n_heads=2)
    assert imported.spec == SPEC
    assert np.array_equal(imported.pos_emb, weights.pos_emb)


def test_import_whisper_command(tmp_path, monkeypatch, weights):
    monkeypatch.setattr(config, "setup_logging", lambda level=None: None)
    checkpoint, output = tmp_path / "whisper.npz", tmp_path / "model.lrta"
    np.savez(checkpoint, **state_dict(weights, "encoder."))
    assert main(["import-whisper", "--checkpoint", str(checkpoint), "--heads", "2", "-o", str(output)]) == 0
    assert load_weights(output).spec == SPEC
    assert main(["import-whisper", "--checkpoint", str(tmp_path / "nope.npz"), "--heads", "2", "-o", str(output)]) == 1
