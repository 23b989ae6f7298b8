"""Pydantic models for rank policies, rank decisions and attention paths."""

from enum import Enum
from typing import Dict, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field

from lrse.schemas.encoder import Site, TapPoint

# (theta_attn, theta_mlp) per deployment preset
PRESETS: Dict[str, Tuple[float, float]] = {
    "a": (0.999, 0.999),  # quality-focused
    "b": (0.99, 0.999),  # balanced
    "c": (0.99, 0.995),  # efficiency-focused
}


class RankPolicy(BaseModel):
    """Variance thresholds per layer group and the rank granularity.

    Attributes:
        theta_attn (float): Threshold for q/k/v/out projections.
        theta_mlp (float): Threshold for fc1/fc2.
        granularity (int): Selected ranks are multiples of this.
    """

    model_config = ConfigDict(frozen=True)

    theta_attn: float = Field(gt=0, le=1)
    theta_mlp: float = Field(gt=0, le=1)
    granularity: int = Field(default=16, ge=1)

    @classmethod
    def preset(cls, name: str, granularity: int = 16) -> "RankPolicy":
        """Builds one of the three presets `a`, `b`, `c`."""
        try:
            theta_attn, theta_mlp = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(theta_attn=theta_attn, theta_mlp=theta_mlp, granularity=granularity)

    def theta_for(self, site: Site) -> float:
        return self.theta_attn if site.is_attention else self.theta_mlp


class RankDecision(BaseModel):
    """Outcome of rank selection for one linear layer.

    Attributes:
        tap (TapPoint | None): Layer the decision applies to.
        k (int | None): Selected rank, or None when the layer stays dense.
        variance_captured (float): Fraction of centered variance in the top-k directions.
        efficiency_cap (int): Largest k with k(D_in + D_out) < D_in·D_out.
        theta_used (float): Threshold the decision was made against.
        granularity (int): Rank step.
        d_in (int): Input width of the layer.
        d_out (int): Output width of the layer.
        k_required (int | None): Smallest admissible-step rank meeting the variance
            constraint alone; None when no rank can strictly exceed theta.
    """

    model_config = ConfigDict(frozen=True)

    tap: Optional[TapPoint] = None
    k: Optional[int] = None
    variance_captured: float = Field(ge=0.0, le=1.0)
    efficiency_cap: int = Field(ge=0)
    theta_used: float
    granularity: int = Field(ge=1)
    d_in: int = Field(ge=1)
    d_out: int = Field(ge=1)
    k_required: Optional[int] = None

    @property
    def is_dense(self) -> bool:
        return self.k is None

    @property
    def rank_ratio(self) -> float:
        """k / min(D_in, D_out); 1.0 for a dense layer."""
        if self.k is None:
            return 1.0
        return self.k / min(self.d_in, self.d_out)


class ScorePath(str, Enum):
    STANDARD = "standard"
    FACTORIZED = "factorized"


class ValuePath(str, Enum):
    STANDARD = "standard"
    REORDERED = "reordered"


class ScoreOrder(str, Enum):
    """Where M = W_Q2·W_K2ᵀ is folded in the factorized score main term."""

    # A·(B·Mᵀ)ᵀ: the L×L product has inner dimension k_Q
    FOLD_INTO_KEYS = "fold_into_keys"
    # (A·M)·Bᵀ: the L×L product has inner dimension k_K
    FOLD_INTO_QUERIES = "fold_into_queries"


class AttnPath(BaseModel):
    """Computation path of one attention block; never changes the result."""

    model_config = ConfigDict(frozen=True)

    score_path: ScorePath = ScorePath.STANDARD
    value_path: ValuePath = ValuePath.STANDARD
    score_order: ScoreOrder = ScoreOrder.FOLD_INTO_KEYS

    @classmethod
    def standard(cls) -> "AttnPath":
        return cls()

    def __str__(self) -> str:
        return f"{self.score_path.value}/{self.value_path.value}"
