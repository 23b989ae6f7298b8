import dataclasses

import numpy as np
import pytest

from lrse.algorithm.calib import collect_stats
from lrse.algorithm.encoder import EncoderWeights, synth_weights
from lrse.algorithm.layers import DenseLinear
from lrse.schemas import SITES, EncoderSpec
from lrse.storage.calib_data import synth_calib


@pytest.fixture(scope="session")
def toy_spec():
    return EncoderSpec.toy()


@pytest.fixture(scope="session")
def toy_weights(toy_spec):
    return synth_weights(toy_spec, seed=7)


@pytest.fixture(scope="session")
def lowrank_weights(toy_spec):
    """Every linear weight has rank 4, so every tap is exactly rank ≤ 4.

    Rank-4 calibration clips alone do not give rank-4 taps on the plain toy
    encoder: the positional embedding and GELU lift the MLP activations well
    above rank 4. This model is the setting where exact recovery at k = 4 holds.
    """
    return synth_weights(toy_spec, seed=7, weight_rank=4)


@pytest.fixture(scope="session")
def toy_calib(toy_spec):
    return synth_calib(toy_spec, n_calib=6, effective_rank=4, noise=0.05, seed=3)


@pytest.fixture(scope="session")
def toy_stats(toy_spec, toy_weights, toy_calib):
    return collect_stats(toy_spec, toy_weights, toy_calib)


@pytest.fixture(scope="session")
def lowrank_calib(toy_spec):
    return synth_calib(toy_spec, n_calib=8, effective_rank=4, noise=0.0, seed=3)


@pytest.fixture(scope="session")
def lowrank_stats(toy_spec, lowrank_weights, lowrank_calib):
    return collect_stats(toy_spec, lowrank_weights, lowrank_calib)


def zero_weights(spec: EncoderSpec) -> EncoderWeights:
    """Zero linear layers, unit layernorm gains, zero positional embedding."""
    base = synth_weights(spec, seed=0)
    layers = []
    for layer in base.layers:
        fields = {}
        for site in SITES:
            d_in, d_out = spec.site_dims(site)
            fields[site.value] = DenseLinear(weight=np.zeros((d_in, d_out)), bias=np.zeros(d_out))
        layers.append(
            dataclasses.replace(
                layer,
                ln1_gain=np.ones(spec.d_model),
                ln1_bias=np.zeros(spec.d_model),
                ln2_gain=np.ones(spec.d_model),
                ln2_bias=np.zeros(spec.d_model),
                **fields,
            )
        )
    return dataclasses.replace(base, layers=tuple(layers), pos_emb=np.zeros((spec.seq_len, spec.d_model)))
