"""Multi-head self-attention over factorized projections.

A projection Y = (X·W1)·W2 + b is sliced per head along the columns of W2.
Scores can then be formed from the shared down-projections A = X·W_Q1 and
B = X·W_K1 without materializing Q_i and K_i, and the value product can be
taken before the up-projection because softmax rows sum to one. Both are
reorderings of the same arithmetic; the path only changes the cost.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Optional

import numpy as np

from lrse.algorithm import flops
from lrse.algorithm.layers import Linear
from lrse.algorithm.linalg import Matrix, Vector, matmul, softmax_rows
from lrse.errors import ContractError, ShapeError
from lrse.schemas import AttnPath, ScoreOrder, ScorePath, Site, ValuePath

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class FactorizedAttnParams:
    """The four projections of an attention block, viewed as per-head factors.

    Query, key and value projections are (down, up, bias) triples; a dense
    projection takes part as (W, I, b). Head i owns columns
    [i·D_head, (i+1)·D_head) of each up-projection and bias.

    Attributes:
        q_proj (Linear): Query projection.
        k_proj (Linear): Key projection.
        v_proj (Linear): Value projection.
        out_proj (Linear): Output projection, applied after the heads are concatenated.
        n_heads (int): Number of heads.
    """

    q_proj: Linear
    k_proj: Linear
    v_proj: Linear
    out_proj: Linear
    n_heads: int

    def __post_init__(self):
        d_model = self.q_proj.d_out
        if d_model % self.n_heads:
            raise ShapeError(f"{d_model} columns do not split into {self.n_heads} heads")
        for proj in (self.k_proj, self.v_proj):
            if proj.d_out != d_model or proj.d_in != self.q_proj.d_in:
                raise ShapeError("query, key and value projections disagree in shape")
        if self.out_proj.d_in != d_model:
            raise ShapeError(f"out projection expects {self.out_proj.d_in} inputs, heads give {d_model}")

    @property
    def d_head(self) -> int:
        return self.q_proj.d_out // self.n_heads

    @property
    def k_q(self) -> int:
        return self.q_proj.rank

    @property
    def k_k(self) -> int:
        return self.k_proj.rank

    @property
    def k_v(self) -> int:
        return self.v_proj.rank

    @cached_property
    def _q(self):
        return self.q_proj.factors()

    @cached_property
    def _k(self):
        return self.k_proj.factors()

    @cached_property
    def _v(self):
        return self.v_proj.factors()

    @property
    def w_q1(self) -> Matrix:
        return self._q[0]

    @property
    def w_k1(self) -> Matrix:
        return self._k[0]

    @property
    def w_v1(self) -> Matrix:
        return self._v[0]

    def head_cols(self, head: int) -> slice:
        if not 0 <= head < self.n_heads:
            raise ShapeError(f"head {head} out of range for {self.n_heads} heads")
        return slice(head * self.d_head, (head + 1) * self.d_head)

    def w_q2(self, head: int) -> Matrix:
        return self._q[1][:, self.head_cols(head)]

    def b_q(self, head: int) -> Vector:
        return self._q[2][self.head_cols(head)]

    def w_k2(self, head: int) -> Matrix:
        return self._k[1][:, self.head_cols(head)]

    def b_k(self, head: int) -> Vector:
        return self._k[2][self.head_cols(head)]

    def w_v2(self, head: int) -> Matrix:
        return self._v[1][:, self.head_cols(head)]

    def b_v(self, head: int) -> Vector:
        return self._v[2][self.head_cols(head)]


def cheaper_score_order(L: int, k_q: int, k_k: int) -> ScoreOrder:
    """Order of A·M·Bᵀ whose L×L product carries min(k_Q, k_K) as inner dimension."""
    if flops.macs_score_order(L, k_q, k_k, ScoreOrder.FOLD_INTO_QUERIES) < flops.macs_score_order(
        L, k_q, k_k, ScoreOrder.FOLD_INTO_KEYS
    ):
        return ScoreOrder.FOLD_INTO_QUERIES
    return ScoreOrder.FOLD_INTO_KEYS


def select_path(L: int, d_head: int, k_q: int, k_k: int, k_v: int) -> AttnPath:
    """Picks the cheapest computation path under the cost model.

    The factorized score is used when min(k_Q, k_K) < D_head and it is
    strictly cheaper than L²·D_head; the reordered value product is used when
    k_V < D_head, which is exactly when it is cheaper.
    """
    order = cheaper_score_order(L, k_q, k_k)
    score = ScorePath.STANDARD
    if min(k_q, k_k) < d_head and flops.macs_attention_score(
        L, d_head, k_q, k_k, ScorePath.FACTORIZED
    ) < flops.macs_attention_score(L, d_head, k_q, k_k, ScorePath.STANDARD):
        score = ScorePath.FACTORIZED

    value = ValuePath.STANDARD
    if flops.macs_attention_value(L, d_head, k_v, ValuePath.REORDERED) < flops.macs_attention_value(
        L, d_head, k_v, ValuePath.STANDARD
    ):
        value = ValuePath.REORDERED

    return AttnPath(score_path=score, value_path=value, score_order=order)


def attn_scores_factorized(
    a: Matrix,
    b: Matrix,
    params: FactorizedAttnParams,
    head: int,
    order: Optional[ScoreOrder] = None,
) -> Matrix:
    """Q_i·K_iᵀ (unscaled) from the shared down-projections.

    Computes A·M·Bᵀ with M = W_Q2^i·W_K2^iᵀ, plus the rank-one bias terms
    u·1ᵀ with u = A·W_Q2^i·b_K^i, 1·vᵀ with v = B·W_K2^i·b_Q^i, and the scalar
    b_Q^i·b_K^i. Bias terms are kept as two vectors and a scalar until the
    final accumulation.

    Args:
        a (Matrix): X·W_Q1, L × k_Q.
        b (Matrix): X·W_K1, L × k_K.
        params (FactorizedAttnParams): Attention factors.
        head (int): Head index.
        order (ScoreOrder | None): Multiplication order of the main term; the
            cheaper one when omitted.

    Raises:
        ShapeError: If A or B do not match the ranks of the parameters.
    """
    w_q2, w_k2 = params.w_q2(head), params.w_k2(head)
    b_q, b_k = params.b_q(head), params.b_k(head)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"A {a.shape} and B {b.shape} must share their row count")
    if a.shape[1] != w_q2.shape[0] or b.shape[1] != w_k2.shape[0]:
        raise ShapeError(
            f"A {a.shape} and B {b.shape} do not match ranks ({w_q2.shape[0]}, {w_k2.shape[0]})"
        )
    if order is None:
        order = cheaper_score_order(a.shape[0], a.shape[1], b.shape[1])

    m = matmul(w_q2, w_k2.T)
    if order is ScoreOrder.FOLD_INTO_KEYS:
        main = matmul(a, matmul(b, m.T).T)
    else:
        main = matmul(matmul(a, m), b.T)

    u = matmul(a, matmul(w_q2, b_k[:, None]))[:, 0]
    v = matmul(b, matmul(w_k2, b_q[:, None]))[:, 0]
    c = matmul(b_q[None, :], b_k[:, None])[0, 0]
    return main + u[:, None] + v[None, :] + c


def value_proj_reordered(s: Matrix, xv: Matrix, params: FactorizedAttnParams, head: int) -> Matrix:
    """S_i·V_i computed as (S_i·(X·W_V1))·W_V2^i + b_V^i.

    The bias passes through S_i unchanged because every row of S_i sums to one.

    Raises:
        ContractError: If a row of `s` sums to something other than 1.
        ShapeError: If `xv` does not match the value rank.
    """
    w_v2 = params.w_v2(head)
    if xv.shape[1] != w_v2.shape[0] or s.shape[1] != xv.shape[0]:
        raise ShapeError(f"S {s.shape} and X·W_V1 {xv.shape} do not match rank {w_v2.shape[0]}")
    drift = np.max(np.abs(s.sum(axis=1) - 1.0)) if s.size else 0.0
    if drift > ROW_SUM_TOL:
        raise ContractError(f"attention rows are not stochastic (max deviation {drift:.3e})")
    return matmul(matmul(s, xv), w_v2) + params.b_v(head)


def attention_block(
    x: Matrix,
    params: FactorizedAttnParams,
    path: Optional[AttnPath] = None,
    record: Optional[Dict[Site, Matrix]] = None,
) -> Matrix:
    """softmax(Q_i·K_iᵀ/√D_head)·V_i over all heads, concatenated and out-projected.

    Args:
        x (Matrix): Normalized block input, L × D_in.
        params (FactorizedAttnParams): Attention factors.
        path (AttnPath | None): Computation path; standard when omitted.
        record (dict | None): When given, receives the full q/k/v/out projection
            outputs that the path materializes.

    Returns:
        Matrix: L × d_model, identical up to rounding for every path.
    """
    path = path or AttnPath.standard()
    scale = 1.0 / np.sqrt(params.d_head)

    if path.score_path is ScorePath.STANDARD:
        q = params.q_proj.apply(x)
        k = params.k_proj.apply(x)
        if record is not None:
            record[Site.Q_PROJ] = q
            record[Site.K_PROJ] = k
    else:
        a = matmul(x, params.w_q1)
        b = matmul(x, params.w_k1)

    if path.value_path is ValuePath.STANDARD:
        v = params.v_proj.apply(x)
        if record is not None:
            record[Site.V_PROJ] = v
    else:
        xv = matmul(x, params.w_v1)

    heads = []
    for i in range(params.n_heads):
        cols = params.head_cols(i)
        if path.score_path is ScorePath.STANDARD:
            scores = matmul(q[:, cols], k[:, cols].T)
        else:
            scores = attn_scores_factorized(a, b, params, i, path.score_order)
        s = softmax_rows(scores, scale)
        if path.value_path is ValuePath.STANDARD:
            heads.append(matmul(s, v[:, cols]))
        else:
            heads.append(value_proj_reordered(s, xv, params, i))

    out = params.out_proj.apply(np.concatenate(heads, axis=1))
    if record is not None:
        record[Site.OUT_PROJ] = out
    return out
