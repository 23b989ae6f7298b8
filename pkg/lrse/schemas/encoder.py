"""Pydantic models describing encoder architecture and activation taps."""

from enum import Enum
from typing import List, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class Site(str, Enum):
    """The six linear layers of an encoder block."""

    Q_PROJ = "q_proj"
    K_PROJ = "k_proj"
    V_PROJ = "v_proj"
    OUT_PROJ = "out_proj"
    FC1 = "fc1"
    FC2 = "fc2"

    @property
    def is_attention(self) -> bool:
        return self in ATTENTION_SITES


ATTENTION_SITES = (Site.Q_PROJ, Site.K_PROJ, Site.V_PROJ, Site.OUT_PROJ)
SITES = ATTENTION_SITES + (Site.FC1, Site.FC2)


class EncoderSpec(BaseModel):
    """Architecture hyperparameters of a Whisper-style encoder.

    Attributes:
        n_layers (int): Number of Transformer blocks.
        d_model (int): Residual width, the input width of every attention projection.
        n_heads (int): Attention heads per block.
        d_head (int): Per-head width; derived as d_model / n_heads when omitted.
        d_ff (int): MLP hidden width.
        seq_len (int): Sequence length L seen by the blocks.
        has_conv_stem (bool): Whether a stride-2 convolution front end precedes the blocks.
        n_mels (int): Feature width entering the conv stem.
        final_norm (bool): Whether a layernorm follows the last block.
        ln_eps (float): Layernorm epsilon.
    """

    model_config = ConfigDict(frozen=True)

    n_layers: int = Field(ge=1)
    d_model: int = Field(ge=1)
    n_heads: int = Field(ge=1)
    d_head: int = Field(ge=1)
    d_ff: int = Field(ge=1)
    seq_len: int = Field(ge=1)
    has_conv_stem: bool = False
    n_mels: int = Field(default=80, ge=1)
    final_norm: bool = False
    ln_eps: float = Field(default=1e-5, gt=0)

    @model_validator(mode="before")
    @classmethod
    def _derive_head_width(cls, data):
        if isinstance(data, dict) and data.get("d_head") is None:
            data = dict(data)
            d_model, n_heads = data.get("d_model"), data.get("n_heads")
            if isinstance(d_model, int) and isinstance(n_heads, int) and n_heads > 0:
                data["d_head"] = d_model // n_heads
        return data

    @model_validator(mode="after")
    def _check_head_split(self):
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(
                f"d_model ({self.d_model}) must equal n_heads × d_head "
                f"({self.n_heads} × {self.d_head})"
            )
        return self

    @classmethod
    def toy(cls, **overrides) -> "EncoderSpec":
        """The desk-scale default: 4 layers, L=64, d_model=32, 4 heads, d_ff=128."""
        fields = dict(n_layers=4, d_model=32, n_heads=4, d_ff=128, seq_len=64)
        fields.update(overrides)
        return cls(**fields)

    @property
    def d_input(self) -> int:
        """Feature width of an encoder input row."""
        return self.n_mels if self.has_conv_stem else self.d_model

    @property
    def input_len(self) -> int:
        """Number of input frames; the conv stem halves it."""
        return 2 * self.seq_len if self.has_conv_stem else self.seq_len

    def site_dims(self, site: Site) -> Tuple[int, int]:
        """Returns (D_in, D_out) of a linear site."""
        if site is Site.FC1:
            return self.d_model, self.d_ff
        if site is Site.FC2:
            return self.d_ff, self.d_model
        return self.d_model, self.d_model

    def all_taps(self) -> List["TapPoint"]:
        return [TapPoint(layer_index=i, site=s) for i in range(self.n_layers) for s in SITES]


class TapPoint(BaseModel):
    """Output of one linear layer, post-bias and pre-nonlinearity.

    Attributes:
        layer_index (int): Block index, starting at 0.
        site (Site): Which linear layer of the block.
    """

    model_config = ConfigDict(frozen=True)

    layer_index: int = Field(ge=0)
    site: Site

    def __str__(self) -> str:
        return f"{self.layer_index}.{self.site.value}"

    @classmethod
    def parse(cls, key: str) -> "TapPoint":
        """Parses the `<layer>.<site>` form used in archive names."""
        layer, _, site = key.partition(".")
        return cls(layer_index=int(layer), site=Site(site))

    @property
    def sort_key(self) -> Tuple[int, int]:
        return self.layer_index, SITES.index(self.site)


def ordered(taps) -> List[TapPoint]:
    """Sorts taps by layer, then by site order within a block."""
    return sorted(taps, key=lambda t: t.sort_key)
