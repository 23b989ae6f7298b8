"""Pydantic models for cost, verification and sweep reports."""

from typing import Dict, List, Optional

from pydantic import BaseModel


class TapMacs(BaseModel):
    """Cost of one linear layer, dense vs. as compressed.

    Attributes:
        tap (str): `<layer>.<site>`.
        d_in (int): Input width.
        d_out (int): Output width.
        k (int | None): Selected rank, None when dense.
        dense_macs (int): L·D_in·D_out.
        compressed_macs (int): L·D_in·k + L·k·D_out, or dense_macs when dense.
        macs_ratio (float): compressed_macs / dense_macs.
        rank_ratio (float): k / min(D_in, D_out), 1.0 when dense.
    """

    tap: str
    d_in: int
    d_out: int
    k: Optional[int] = None
    dense_macs: int
    compressed_macs: int
    macs_ratio: float
    rank_ratio: float


class AttentionMacs(BaseModel):
    """Attention-core cost of one block, summed over heads.

    Attributes:
        layer_index (int): Block index.
        k_q (int): Rank of the query projection (D_out when dense).
        k_k (int): Rank of the key projection.
        k_v (int): Rank of the value projection.
        score_standard (int): L²·D_head per head.
        score_factorized (int): L·k_Q·k_K + L²·min(k_Q, k_K) per head.
        value_standard (int): L²·D_head + L·k_V·D_head per head.
        value_reordered (int): L²·k_V + L·k_V·D_head per head.
        path (str): Chosen `score/value` path.
        dense_macs (int): Standard score and value at the uncompressed ranks (d_model).
        chosen_macs (int): Score and value cost of the chosen path.
    """

    layer_index: int
    k_q: int
    k_k: int
    k_v: int
    score_standard: int
    score_factorized: int
    value_standard: int
    value_reordered: int
    path: str
    dense_macs: int
    chosen_macs: int


class FlopsReport(BaseModel):
    """Multiply-accumulate and parameter counts of a compressed encoder."""

    taps: List[TapMacs]
    attention: List[AttentionMacs]
    linear_dense_macs: int
    linear_compressed_macs: int
    attention_dense_macs: int
    attention_compressed_macs: int
    total_dense_macs: int
    total_compressed_macs: int
    params_original: int
    params_compressed: int
    site_rank_ratio: Dict[str, float]

    @property
    def total_ratio(self) -> float:
        return self.total_compressed_macs / self.total_dense_macs

    @property
    def size_fraction(self) -> float:
        return self.params_compressed / self.params_original


class VerifyReport(BaseModel):
    """Output agreement between an original and a compressed encoder.

    Attributes:
        probes (int): Number of probe inputs.
        max_rel_err (float): Largest ‖out_c − out_o‖_F / ‖out_o‖_F over probes.
        mean_rel_err (float): Mean of the same quantity.
        path_residuals (List[float]): Per block, the largest deviation of any
            attention path combination from the standard one.
        certificates_ok (bool): Every decision and chosen path is cheaper than its alternative.
        tolerance (float): Pass threshold on max_rel_err.
        passed (bool): Finite error within tolerance.
    """

    probes: int
    max_rel_err: float
    mean_rel_err: float
    path_residuals: List[float]
    certificates_ok: bool
    tolerance: float
    passed: bool


class SweepRow(BaseModel):
    """One (theta_attn, theta_mlp) point of a threshold sweep."""

    theta_attn: float
    theta_mlp: float
    params: int
    macs: int
    rel_err: float
    certificates_ok: bool = True


SWEEP_COLUMNS = ("theta_attn", "theta_mlp", "params", "macs", "rel_err")
