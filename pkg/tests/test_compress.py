import dataclasses
import logging

import numpy as np
import pytest

from lrse.algorithm import flops
from lrse.algorithm.calib import ActivationStats
from lrse.algorithm.compress import (
    CompressedEncoder,
    compress_encoder,
    factorize_layer,
    forward_compressed,
    path_residuals,
    select_rank,
)
from lrse.algorithm.encoder import forward
from lrse.algorithm.layers import DenseLinear, FactorizedLinear
from lrse.errors import RangeError, ShapeError, UsageError
from lrse.schemas import RankPolicy, ScorePath, Site, TapPoint, ValuePath


def oracle_rank(lam, d_in, d_out, theta, granularity):
    """Brute-force reading of the selection rule: (k, k_required)."""
    cumulative = np.cumsum(lam)
    total = cumulative[-1]
    cap = max(k for k in range(0, d_out + 1) if k * (d_in + d_out) < d_in * d_out)
    k_required = None
    for k in range(1, d_out + 1):
        if k % granularity:
            continue
        if total <= 0.0:
            k_required = k if theta < 1.0 else None
            break
        if cumulative[k - 1] > theta * total:
            k_required = k
            break
    if k_required is None or k_required > cap:
        return None, k_required
    return k_required, k_required


def random_spectrum(rng, n):
    kind = rng.integers(4)
    if kind == 0:
        lam = rng.exponential(size=n)
    elif kind == 1:
        lam = 1.0 / np.arange(1, n + 1) ** rng.uniform(0.5, 3.0)
    elif kind == 2:
        lam = rng.exponential(size=n)
        lam[rng.integers(1, n + 1) :] = 0.0
    else:
        lam = np.zeros(n) if rng.random() < 0.2 else np.ones(n)
    return np.sort(lam)[::-1].copy()


def random_stats(rng, d_out):
    basis, _ = np.linalg.qr(rng.standard_normal((d_out, d_out)))
    return ActivationStats(
        tap=TapPoint(layer_index=0, site=Site.FC1),
        mean=rng.standard_normal(d_out),
        eigenvalues=np.sort(rng.exponential(size=d_out))[::-1].copy(),
        basis=basis,
        sample_count=100,
    )


def relative_error(reference, approx):
    return np.linalg.norm(approx - reference) / np.linalg.norm(reference)


def test_select_rank_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        d_in, d_out = (int(d) for d in rng.integers(1, 65, size=2))
        granularity = int(rng.choice([1, 2, 4, 16]))
        theta = 1.0 if rng.random() < 0.05 else float(rng.uniform(0.01, 1.0))
        lam = random_spectrum(rng, d_out)
        decision = select_rank(lam, d_in, d_out, theta, granularity)
        k, k_required = oracle_rank(lam, d_in, d_out, theta, granularity)
        assert (decision.k, decision.k_required) == (k, k_required)
        if not decision.is_dense:
            assert decision.k % granularity == 0
            assert decision.k * (d_in + d_out) < d_in * d_out
            if lam.sum() > 0:
                assert decision.variance_captured > theta


def test_efficiency_caps():
    assert flops.efficiency_cap(1280, 1280) == 639
    assert flops.efficiency_cap(1280, 5120) == 1023
    assert flops.efficiency_cap(5120, 1280) == 1023
    assert flops.efficiency_cap(1, 1) == 0


def test_select_rank_strict_threshold_and_cap():
    flat = np.ones(1280)
    exact_half = select_rank(flat, 1280, 1280, 0.5)
    assert exact_half.is_dense
    assert exact_half.k_required == 656
    assert exact_half.efficiency_cap == 639
    assert exact_half.variance_captured == 1.0

    below_cap = select_rank(flat, 1280, 1280, 0.48)
    assert below_cap.k == 624
    assert below_cap.variance_captured == pytest.approx(624 / 1280)


def test_select_rank_single_direction():
    lam = np.zeros(64)
    lam[0] = 5.0
    decision = select_rank(lam, 64, 64, 0.99)
    assert decision.k == 16
    assert decision.variance_captured == 1.0
    assert decision.rank_ratio == 0.25


def test_select_rank_geometric_spectrum():
    lam = 0.5 ** np.arange(32)
    decision = select_rank(lam, 32, 32, 0.99, granularity=4)
    assert decision.k == 8
    assert decision.variance_captured == pytest.approx((1 - 0.5**8) / (1 - 0.5**32))


def test_select_rank_zero_spectrum():
    zeros = np.zeros(64)
    assert select_rank(zeros, 64, 64, 0.99).k == 16
    full = select_rank(zeros, 64, 64, 1.0)
    assert full.is_dense and full.k_required is None
    above_cap = select_rank(zeros, 64, 64, 0.5, granularity=32)
    assert above_cap.is_dense and above_cap.k_required == 32


def test_select_rank_theta_one_is_dense():
    decision = select_rank(np.linspace(2.0, 1.0, 32), 32, 32, 1.0, granularity=1)
    assert decision.is_dense
    assert decision.k_required is None


@pytest.mark.parametrize(
    "lam, theta, granularity",
    [
        (np.ones(8), 0.0, 1),
        (np.ones(8), 1.5, 1),
        (np.ones(8), 0.9, 0),
        (np.ones(7), 0.9, 1),
        (np.array([1.0, -1.0, 0, 0, 0, 0, 0, 0]), 0.9, 1),
        (np.arange(8.0), 0.9, 1),
    ],
)
def test_select_rank_rejects_bad_input(lam, theta, granularity):
    with pytest.raises(RangeError):
        select_rank(lam, 8, 8, theta, granularity)


def test_factorize_layer_identity():
    rng = np.random.default_rng(1)
    for _ in range(200):
        d_in, d_out = (int(d) for d in rng.integers(1, 24, size=2))
        k = int(rng.integers(1, d_out + 1))
        w = rng.standard_normal((d_in, d_out))
        b = rng.standard_normal(d_out)
        stats = random_stats(rng, d_out)
        layer = factorize_layer(w, b, stats, k)
        assert layer.rank == k
        x = rng.standard_normal((5, d_in))
        p = stats.basis[:, :k] @ stats.basis[:, :k].T
        expected = (x @ w + b - stats.mean) @ p + stats.mean
        assert np.max(np.abs(layer.apply(x) - expected)) <= 1e-10 * max(np.abs(expected).max(), 1.0)


def test_full_rank_factorization_is_exact():
    rng = np.random.default_rng(2)
    w, b = rng.standard_normal((12, 10)), rng.standard_normal(10)
    layer = factorize_layer(w, b, random_stats(rng, 10), 10)
    x = rng.standard_normal((7, 12))
    assert np.max(np.abs(layer.apply(x) - (x @ w + b))) < 1e-10


def test_zero_weight_gives_constant_rows():
    rng = np.random.default_rng(3)
    stats = random_stats(rng, 6)
    layer = factorize_layer(np.zeros((4, 6)), rng.standard_normal(6), stats, 2)
    out = layer.apply(rng.standard_normal((5, 4)))
    assert np.all(out == layer.bias)


def test_factorize_layer_errors():
    rng = np.random.default_rng(4)
    stats = random_stats(rng, 6)
    with pytest.raises(ShapeError):
        factorize_layer(np.zeros((4, 5)), np.zeros(5), stats, 2)
    with pytest.raises(ShapeError):
        factorize_layer(np.zeros((4, 6)), np.zeros(5), stats, 2)
    with pytest.raises(RangeError):
        factorize_layer(np.zeros((4, 6)), np.zeros(6), stats, 0)
    with pytest.raises(RangeError):
        factorize_layer(np.zeros((4, 6)), np.zeros(6), stats, 7)


def test_theta_one_keeps_the_encoder_intact(toy_spec, toy_weights, toy_stats, caplog):
    with caplog.at_level(logging.WARNING, logger="lrse.algorithm.compress"):
        compressed = compress_encoder(toy_weights, toy_stats, RankPolicy(theta_attn=1.0, theta_mlp=1.0))
    assert "24 of 24 taps stay dense" in caplog.text
    assert compressed.n_factorized == 0
    assert compressed.param_count() == compressed.original_param_count() == toy_weights.param_count()
    x = np.random.default_rng(5).standard_normal((toy_spec.seq_len, toy_spec.d_model))
    assert np.array_equal(forward_compressed(compressed, x), forward(toy_spec, toy_weights, x))


def test_preset_thresholds(toy_weights, toy_stats):
    compressed = compress_encoder(toy_weights, toy_stats, RankPolicy.preset("b"))
    for decision in compressed.decisions:
        expected = 0.99 if decision.tap.site.is_attention else 0.999
        assert decision.theta_used == expected
        assert decision.granularity == 16


def test_low_rank_encoder_compresses_exactly(toy_spec, lowrank_weights, lowrank_stats):
    """Exact recovery at k = 4 needs rank-4 weights, not only rank-4 clips;
    see the `lowrank_weights` fixture."""
    policy = RankPolicy(theta_attn=0.999, theta_mlp=0.999, granularity=4)
    compressed = compress_encoder(lowrank_weights, lowrank_stats, policy)
    assert [d.k for d in compressed.decisions] == [4] * 24
    for path in compressed.paths:
        assert path.score_path is ScorePath.FACTORIZED
        assert path.value_path is ValuePath.REORDERED

    rng = np.random.default_rng(6)
    for _ in range(3):
        x = rng.standard_normal((toy_spec.seq_len, toy_spec.d_model))
        reference = forward(toy_spec, lowrank_weights, x)
        assert relative_error(reference, forward_compressed(compressed, x)) < 1e-3

    rep = flops.report(compressed)
    assert rep.total_compressed_macs < 0.5 * rep.total_dense_macs
    assert compressed.param_count() < compressed.original_param_count()
    assert flops.check_certificates(compressed) == []
    assert max(path_residuals(compressed, x)) < 1e-9


def test_basis_sign_flips_do_not_change_output(toy_spec, toy_weights, toy_stats):
    rng = np.random.default_rng(7)
    flipped = {}
    for tap, st in toy_stats.items():
        signs = rng.choice([-1.0, 1.0], size=st.basis.shape[1])
        flipped[tap] = dataclasses.replace(st, basis=st.basis * signs)
    policy = RankPolicy.preset("c")
    a = compress_encoder(toy_weights, toy_stats, policy)
    b = compress_encoder(toy_weights, flipped, policy)
    assert [d.k for d in a.decisions] == [d.k for d in b.decisions]
    x = rng.standard_normal((toy_spec.seq_len, toy_spec.d_model))
    assert np.max(np.abs(forward_compressed(a, x) - forward_compressed(b, x))) < 1e-10


def test_ranks_grow_with_theta(toy_weights, toy_stats):
    thetas = [0.5, 0.9, 0.99, 0.999, 1.0]
    previous = None
    for theta in thetas:
        compressed = compress_encoder(toy_weights, toy_stats, RankPolicy(theta_attn=theta, theta_mlp=theta, granularity=4))
        ranks = [np.inf if d.is_dense else d.k for d in compressed.decisions]
        if previous is not None:
            assert all(r >= p for r, p in zip(ranks, previous))
        previous = ranks
        assert flops.check_certificates(compressed) == []


def test_compress_encoder_errors(toy_weights, toy_stats):
    policy = RankPolicy.preset("a")
    partial = dict(toy_stats)
    del partial[TapPoint(layer_index=3, site=Site.FC2)]
    with pytest.raises(UsageError, match="3.fc2"):
        compress_encoder(toy_weights, partial, policy)

    compressed = compress_encoder(toy_weights, toy_stats, RankPolicy(theta_attn=0.5, theta_mlp=0.5, granularity=4))
    assert compressed.n_factorized > 0
    with pytest.raises(UsageError):
        compress_encoder(compressed.weights, toy_stats, policy)

    narrow = dict(toy_stats)
    tap = TapPoint(layer_index=0, site=Site.FC1)
    narrow[tap] = toy_stats[TapPoint(layer_index=0, site=Site.Q_PROJ)]
    with pytest.raises(ShapeError):
        compress_encoder(toy_weights, narrow, policy)


def test_assemble_validates_decisions(toy_weights, toy_stats):
    compressed = compress_encoder(toy_weights, toy_stats, RankPolicy(theta_attn=0.5, theta_mlp=0.5, granularity=4))
    again = CompressedEncoder.assemble(compressed.weights, list(reversed(compressed.decisions)))
    assert again.decisions == compressed.decisions
    assert again.paths == compressed.paths

    with pytest.raises(UsageError):
        CompressedEncoder.assemble(compressed.weights, compressed.decisions[:-1])
    factorized = next(d for d in compressed.decisions if not d.is_dense)
    wrong = [d.model_copy(update={"k": None}) if d is factorized else d for d in compressed.decisions]
    with pytest.raises(UsageError):
        CompressedEncoder.assemble(compressed.weights, wrong)


def test_decision_lookup(toy_weights, toy_stats):
    compressed = compress_encoder(toy_weights, toy_stats, RankPolicy.preset("a"))
    tap = TapPoint(layer_index=2, site=Site.V_PROJ)
    assert compressed.decision(tap).tap == tap
    layer = compressed.weights.layers[2].v_proj
    assert isinstance(layer, DenseLinear if compressed.decision(tap).is_dense else FactorizedLinear)
