"""Multiply-accumulate cost model for dense and factorized layers and for both
attention paths, plus the per-layer cost report.

Costs count matrix-product MACs only; bias additions, softmax and other
elementwise work are excluded. The attention polynomials are the textbook
big-O expressions with unit constants, a model rather than a hardware
measurement.
"""

from collections import defaultdict
from typing import TYPE_CHECKING, List

from lrse.schemas import (
    SITES,
    AttentionMacs,
    AttnPath,
    FlopsReport,
    ScoreOrder,
    ScorePath,
    TapMacs,
    ValuePath,
)

if TYPE_CHECKING:
    from lrse.algorithm.compress import CompressedEncoder


def macs_dense_linear(L: int, d_in: int, d_out: int) -> int:
    return L * d_in * d_out


def macs_factorized_linear(L: int, d_in: int, k: int, d_out: int) -> int:
    return L * d_in * k + L * k * d_out


def efficiency_cap(d_in: int, d_out: int) -> int:
    """Largest k with k·(D_in + D_out) < D_in·D_out, i.e. the largest rank whose
    factorized layer is strictly cheaper than the dense one."""
    return (d_in * d_out - 1) // (d_in + d_out)


def macs_score_order(L: int, k_q: int, k_k: int, order: ScoreOrder) -> int:
    """Cost of A·M·Bᵀ for one head with M = W_Q2·W_K2ᵀ already formed."""
    if order is ScoreOrder.FOLD_INTO_KEYS:
        return L * k_k * k_q + L * L * k_q
    return L * k_q * k_k + L * L * k_k


def macs_attention_score(L: int, d_head: int, k_q: int, k_k: int, path: ScorePath) -> int:
    """Q_i·K_iᵀ for one head: L²·D_head, or L·k_Q·k_K + L²·min(k_Q, k_K)."""
    if path is ScorePath.STANDARD:
        return L * L * d_head
    return L * k_q * k_k + L * L * min(k_q, k_k)


def macs_attention_value(L: int, d_head: int, k_v: int, path: ValuePath) -> int:
    """S_i·V_i for one head: L²·D_head + L·k_V·D_head, or L²·k_V + L·k_V·D_head."""
    if path is ValuePath.STANDARD:
        return L * L * d_head + L * k_v * d_head
    return L * L * k_v + L * k_v * d_head


def macs_attention(L: int, d_head: int, k_q: int, k_k: int, k_v: int, path: AttnPath) -> int:
    """Score plus value cost of one head under `path`."""
    return macs_attention_score(L, d_head, k_q, k_k, path.score_path) + macs_attention_value(
        L, d_head, k_v, path.value_path
    )


def report(compressed: "CompressedEncoder") -> FlopsReport:
    """Assembles per-tap, per-block and total costs of a compressed encoder.

    Args:
        compressed (CompressedEncoder): Encoder with its rank decisions and attention paths.

    Returns:
        FlopsReport: Exact integer MAC counts, ratios and parameter counts.
    """
    spec = compressed.spec
    L = spec.seq_len

    taps: List[TapMacs] = []
    ratios = defaultdict(list)
    for decision in compressed.decisions:
        d_in, d_out = decision.d_in, decision.d_out
        dense = macs_dense_linear(L, d_in, d_out)
        if decision.is_dense:
            compressed_macs = dense
        else:
            compressed_macs = macs_factorized_linear(L, d_in, decision.k, d_out)
        taps.append(
            TapMacs(
                tap=str(decision.tap),
                d_in=d_in,
                d_out=d_out,
                k=decision.k,
                dense_macs=dense,
                compressed_macs=compressed_macs,
                macs_ratio=compressed_macs / dense,
                rank_ratio=decision.rank_ratio,
            )
        )
        ratios[decision.tap.site.value].append(decision.rank_ratio)

    attention: List[AttentionMacs] = []
    h, d_head, d_model = spec.n_heads, spec.d_head, spec.d_model
    for i, layer in enumerate(compressed.weights.layers):
        k_q, k_k, k_v = layer.q_proj.rank, layer.k_proj.rank, layer.v_proj.rank
        path = compressed.paths[i]
        standard = AttnPath.standard()
        attention.append(
            AttentionMacs(
                layer_index=i,
                k_q=k_q,
                k_k=k_k,
                k_v=k_v,
                score_standard=h * macs_attention_score(L, d_head, k_q, k_k, ScorePath.STANDARD),
                score_factorized=h
                * macs_attention_score(L, d_head, k_q, k_k, ScorePath.FACTORIZED),
                value_standard=h * macs_attention_value(L, d_head, k_v, ValuePath.STANDARD),
                value_reordered=h * macs_attention_value(L, d_head, k_v, ValuePath.REORDERED),
                path=str(path),
                dense_macs=h * macs_attention(L, d_head, d_model, d_model, d_model, standard),
                chosen_macs=h * macs_attention(L, d_head, k_q, k_k, k_v, path),
            )
        )

    linear_dense = sum(t.dense_macs for t in taps)
    linear_compressed = sum(t.compressed_macs for t in taps)
    attention_dense = sum(a.dense_macs for a in attention)
    attention_compressed = sum(a.chosen_macs for a in attention)
    return FlopsReport(
        taps=taps,
        attention=attention,
        linear_dense_macs=linear_dense,
        linear_compressed_macs=linear_compressed,
        attention_dense_macs=attention_dense,
        attention_compressed_macs=attention_compressed,
        total_dense_macs=linear_dense + attention_dense,
        total_compressed_macs=linear_compressed + attention_compressed,
        params_original=compressed.original_param_count(),
        params_compressed=compressed.param_count(),
        site_rank_ratio={
            site.value: sum(ratios[site.value]) / len(ratios[site.value])
            for site in SITES
            if ratios[site.value]
        },
    )


def check_certificates(compressed: "CompressedEncoder") -> List[str]:
    """Re-verifies every rank decision and attention path against the cost model.

    Returns:
        List[str]: One message per violation; empty when every choice is
        strictly cheaper than (or, for standard choices, no costlier than) its
        rejected alternative.
    """
    spec = compressed.spec
    L, d_head = spec.seq_len, spec.d_head
    problems = []

    for d in compressed.decisions:
        if d.is_dense:
            if d.k_required is not None and d.k_required <= d.efficiency_cap:
                problems.append(f"{d.tap}: dense although k={d.k_required} is admissible")
            continue
        if not macs_factorized_linear(L, d.d_in, d.k, d.d_out) < macs_dense_linear(
            L, d.d_in, d.d_out
        ):
            problems.append(f"{d.tap}: k={d.k} is not cheaper than dense")
        if d.k % d.granularity or d.k > d.efficiency_cap:
            problems.append(f"{d.tap}: k={d.k} violates granularity or cap")
        if not d.variance_captured > d.theta_used:
            problems.append(f"{d.tap}: captured {d.variance_captured} does not exceed theta")

    for i, layer in enumerate(compressed.weights.layers):
        k_q, k_k, k_v = layer.q_proj.rank, layer.k_proj.rank, layer.v_proj.rank
        path = compressed.paths[i]
        standard = macs_attention_score(L, d_head, k_q, k_k, ScorePath.STANDARD)
        factorized = macs_attention_score(L, d_head, k_q, k_k, ScorePath.FACTORIZED)
        if path.score_path is ScorePath.FACTORIZED:
            if not factorized < standard:
                problems.append(f"layer {i}: factorized score is not cheaper")
            chosen = macs_score_order(L, k_q, k_k, path.score_order)
            if chosen != factorized:
                problems.append(f"layer {i}: score order {path.score_order.value} is the costlier one")
        elif min(k_q, k_k) < d_head and factorized < standard:
            problems.append(f"layer {i}: standard score kept although factorized is cheaper")

        standard = macs_attention_value(L, d_head, k_v, ValuePath.STANDARD)
        reordered = macs_attention_value(L, d_head, k_v, ValuePath.REORDERED)
        if path.value_path is ValuePath.REORDERED and not reordered < standard:
            problems.append(f"layer {i}: reordered value is not cheaper")
        if path.value_path is ValuePath.STANDARD and reordered < standard:
            problems.append(f"layer {i}: standard value kept although reordered is cheaper")
    return problems


def format_report(rep: FlopsReport) -> str:
    """Renders a report as aligned plain-text columns."""
    lines = [
        f"{'tap':<12}{'d_in':>7}{'d_out':>7}{'k':>7}{'rank_ratio':>12}"
        f"{'dense_macs':>16}{'compressed_macs':>18}{'macs_ratio':>12}"
    ]
    for t in rep.taps:
        k = "dense" if t.k is None else str(t.k)
        lines.append(
            f"{t.tap:<12}{t.d_in:>7}{t.d_out:>7}{k:>7}{t.rank_ratio:>12.4f}"
            f"{t.dense_macs:>16}{t.compressed_macs:>18}{t.macs_ratio:>12.4f}"
        )
    lines.append("")
    lines.append(
        f"{'layer':<8}{'k_q':>6}{'k_k':>6}{'k_v':>6}  {'path':<24}{'dense_macs':>14}{'chosen_macs':>14}"
    )
    for a in rep.attention:
        lines.append(
            f"{a.layer_index:<8}{a.k_q:>6}{a.k_k:>6}{a.k_v:>6}  {a.path:<24}"
            f"{a.dense_macs:>14}{a.chosen_macs:>14}"
        )
    lines.append("")
    lines.append(f"linear MACs     {rep.linear_compressed_macs} / {rep.linear_dense_macs}")
    lines.append(f"attention MACs  {rep.attention_compressed_macs} / {rep.attention_dense_macs}")
    lines.append(
        f"total MACs      {rep.total_compressed_macs} / {rep.total_dense_macs} "
        f"({rep.total_ratio:.4f})"
    )
    lines.append(
        f"parameters      {rep.params_compressed} / {rep.params_original} "
        f"({100.0 * rep.size_fraction:.1f}%)"
    )
    by_site = "  ".join(f"{s}={r:.3f}" for s, r in rep.site_rank_ratio.items())
    lines.append(f"mean rank ratio {by_site}")
    return "\n".join(lines)
