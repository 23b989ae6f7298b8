"""Pydantic model for command options shared across the pipeline."""

from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, model_validator

from lrse.schemas.compression import PRESETS, RankPolicy


class RunConfig(BaseModel):
    """Validated options of a CLI run.

    Attributes:
        model (Path | None): Weights archive.
        calib (Path | None): Calibration archive.
        stats (Path | None): Statistics archive.
        compressed (Path | None): Compressed archive to read.
        output (Path | None): Output path.
        preset (str | None): One of the deployment presets; excludes explicit thetas.
        theta_attn (float | None): Threshold for attention projections.
        theta_mlp (float | None): Threshold for MLP layers.
        granularity (int): Rank step.
        seed (int): Seed for any randomness in the run.
        tolerance (float): Verification threshold on relative output error.
    """

    model: Optional[Path] = None
    calib: Optional[Path] = None
    stats: Optional[Path] = None
    compressed: Optional[Path] = None
    output: Optional[Path] = None
    preset: Optional[str] = None
    theta_attn: Optional[float] = Field(default=None, gt=0, le=1)
    theta_mlp: Optional[float] = Field(default=None, gt=0, le=1)
    granularity: int = Field(default=16, ge=1)
    seed: int = 0
    tolerance: float = Field(default=0.05, gt=0)

    @model_validator(mode="after")
    def _check_policy_source(self):
        explicit = self.theta_attn is not None or self.theta_mlp is not None
        if self.preset is not None and explicit:
            raise ValueError("--preset and explicit thetas are mutually exclusive")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        if explicit and (self.theta_attn is None or self.theta_mlp is None):
            raise ValueError("--theta-attn and --theta-mlp must be given together")
        return self

    def policy(self) -> RankPolicy:
        """The rank policy these options describe; preset `b` when none is given."""
        if self.theta_attn is not None:
            return RankPolicy(
                theta_attn=self.theta_attn,
                theta_mlp=self.theta_mlp,
                granularity=self.granularity,
            )
        return RankPolicy.preset(self.preset or "b", granularity=self.granularity)
