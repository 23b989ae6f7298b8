"""Linear layer representations shared by the dense and compressed encoders."""

from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from lrse.algorithm.linalg import Matrix, Vector, matmul
from lrse.errors import ShapeError


@dataclass(frozen=True)
class DenseLinear:
    """Y = X·W + b.

    Attributes:
        weight (Matrix): D_in × D_out.
        bias (Vector): D_out.
    """

    weight: Matrix
    bias: Vector

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"weight {self.weight.shape} does not match bias {self.bias.shape}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    @property
    def rank(self) -> int:
        return self.d_out

    @property
    def n_params(self) -> int:
        return self.weight.size + self.bias.size

    def apply(self, x: Matrix) -> Matrix:
        return matmul(x, self.weight) + self.bias

    def factors(self) -> Tuple[Matrix, Matrix, Vector]:
        """(down, up, bias) with down·up = W; a dense layer is the pair (W, I)."""
        return self.weight, np.eye(self.d_out), self.bias


@dataclass(frozen=True)
class FactorizedLinear:
    """Y ≈ (X·w_down)·w_up + bias, the low-rank replacement of a dense layer.

    Attributes:
        w_down (Matrix): D_in × k, equal to W·V_k.
        w_up (Matrix): k × D_out, equal to V_kᵀ.
        bias (Vector): D_out, equal to Y_M + (b − Y_M)·V_k·V_kᵀ.
    """

    w_down: Matrix
    w_up: Matrix
    bias: Vector

    def __post_init__(self):
        if (
            self.w_down.ndim != 2
            or self.w_up.ndim != 2
            or self.w_down.shape[1] != self.w_up.shape[0]
            or self.bias.shape != (self.w_up.shape[1],)
        ):
            raise ShapeError(
                f"inconsistent factors: w_down {self.w_down.shape}, "
                f"w_up {self.w_up.shape}, bias {self.bias.shape}"
            )

    @property
    def d_in(self) -> int:
        return self.w_down.shape[0]

    @property
    def d_out(self) -> int:
        return self.w_up.shape[1]

    @property
    def rank(self) -> int:
        return self.w_down.shape[1]

    @property
    def n_params(self) -> int:
        return self.w_down.size + self.w_up.size + self.bias.size

    def apply(self, x: Matrix) -> Matrix:
        return matmul(matmul(x, self.w_down), self.w_up) + self.bias

    def factors(self) -> Tuple[Matrix, Matrix, Vector]:
        return self.w_down, self.w_up, self.bias


Linear = Union[DenseLinear, FactorizedLinear]
