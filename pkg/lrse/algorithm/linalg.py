"""Deterministic dense linear algebra: products, a symmetric eigensolver and
the elementwise kernels of a Transformer block.

Every function works on 2-D float64 numpy arrays and returns new arrays; no
function keeps state between calls.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np
import numpy.typing as npt

from lrse.errors import ConvergenceError, DataError, ShapeError

logger = logging.getLogger(__name__)

Matrix = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]

JACOBI_TOL = 1e-11
JACOBI_MAX_SWEEPS = 100
# Relative magnitude below which negative eigenvalues are rounding noise
EPS_SYM = 1e-12


def as_matrix(data, name: str = "matrix") -> Matrix:
    """Converts external input to a finite 2-D float64 array.

    Args:
        data (array_like): Values to convert; float32 input is widened.
        name (str): Used in error messages.

    Returns:
        Matrix: A float64 copy-or-view of `data`.

    Raises:
        ShapeError: If `data` is not 2-D.
        DataError: If `data` contains NaN or Inf.
    """
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DataError(f"{name} contains non-finite entries")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed accumulation order.

    Each output entry is accumulated as ((a[i,0]b[0,j] + a[i,1]b[1,j]) + ...)
    left to right, with a separate rounding for every multiply and add, so the
    result is bit-identical to a naive triple loop on any platform.

    Raises:
        ShapeError: If the operands are not 2-D or a.cols != b.rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")

    rows, inner = a.shape
    out = np.zeros((rows, b.shape[1]))
    if inner == 0:
        return out
    term = np.empty_like(out)
    np.multiply(a[:, :1], b[:1, :], out=out)
    for p in range(1, inner):
        np.multiply(a[:, p : p + 1], b[p : p + 1, :], out=term)
        out += term
    return out


@dataclass(frozen=True)
class EigenDecomposition:
    """Eigenpairs of a symmetric matrix.

    Attributes:
        eigenvalues (Vector): Sorted non-increasing.
        eigenvectors (Matrix): Orthonormal columns, column i pairs with eigenvalue i.
    """

    eigenvalues: Vector
    eigenvectors: Matrix

    def reconstruct(self) -> Matrix:
        v = self.eigenvectors
        return matmul(v * self.eigenvalues, v.T)


@lru_cache(maxsize=32)
def _round_robin(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Pairings of indices 0..n-1 such that each round holds disjoint pairs and
    every pair appears exactly once per sweep (circle method)."""
    m = n + n % 2
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [
            (min(players[i], players[m - 1 - i]), max(players[i], players[m - 1 - i]))
            for i in range(m // 2)
        ]
        pairs = [(p, q) for p, q in pairs if q < n]
        rounds.append(
            (np.array([p for p, _ in pairs], dtype=int), np.array([q for _, q in pairs], dtype=int))
        )
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a: Matrix) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def sym_eig(
    s: Matrix, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS
) -> EigenDecomposition:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    The input is symmetrized as (s + sᵀ)/2. Each sweep visits every
    off-diagonal pair once, in round-robin order so that the rotations of a
    round touch disjoint rows and columns and can be applied together.
    Iteration stops when the off-diagonal Frobenius norm drops to
    `tol`·‖s‖_F.

    Args:
        s (Matrix): Square, symmetric within rounding.
        tol (float): Relative off-diagonal tolerance.
        max_sweeps (int): Sweep cap.

    Returns:
        EigenDecomposition: Eigenvalues descending (ties keep rotation order),
        tiny negative eigenvalues within EPS_SYM·‖s‖_F clamped to 0.

    Raises:
        ShapeError: If `s` is not square.
        ConvergenceError: If the sweep cap is reached.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got shape {s.shape}")

    a = (s + s.T) / 2.0
    n = a.shape[0]
    v = np.eye(n)
    scale = float(np.linalg.norm(a))

    sweeps = 0
    if n > 1 and scale > 0.0:
        rounds = _round_robin(n)
        off = _off_norm(a)
        while off > tol * scale:
            if sweeps == max_sweeps:
                raise ConvergenceError(off, sweeps)
            for p, q in rounds:
                if p.size == 0:
                    continue
                _rotate(a, v, p, q)
            sweeps += 1
            off = _off_norm(a)
        logger.debug("Jacobi converged: n=%d sweeps=%d off=%.3e", n, sweeps, off)

    eigenvalues = np.diag(a).copy()
    eigenvalues[(eigenvalues < 0.0) & (eigenvalues >= -EPS_SYM * scale)] = 0.0
    order = np.argsort(-eigenvalues, kind="stable")
    return EigenDecomposition(eigenvalues=eigenvalues[order], eigenvectors=v[:, order])


def _rotate(a: Matrix, v: Matrix, p: np.ndarray, q: np.ndarray) -> None:
    """Applies one round of disjoint Jacobi rotations in place: a ← JᵀaJ, v ← vJ."""
    apq = a[p, q]
    app = a[p, p]
    aqq = a[q, q]
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        tau = (aqq - app) / (2.0 * apq)
        t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.sqrt(1.0 + tau * tau))
    t = np.where(apq == 0.0, 0.0, t)
    c = 1.0 / np.sqrt(1.0 + t * t)
    sn = t * c

    rp = a[p, :].copy()
    rq = a[q, :].copy()
    a[p, :] = c[:, None] * rp - sn[:, None] * rq
    a[q, :] = sn[:, None] * rp + c[:, None] * rq

    cp = a[:, p].copy()
    cq = a[:, q].copy()
    a[:, p] = cp * c - cq * sn
    a[:, q] = cp * sn + cq * c

    vp = v[:, p].copy()
    vq = v[:, q].copy()
    v[:, p] = vp * c - vq * sn
    v[:, q] = vp * sn + vq * c


def softmax_rows(m: Matrix, scale: float = 1.0) -> Matrix:
    """Row-wise softmax of `scale`·m with per-row max subtraction.

    Raises:
        DataError: If `m` contains NaN or Inf.
    """
    m = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(m)):
        raise DataError("softmax input contains non-finite entries")
    z = m * scale
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def layernorm(m: Matrix, gain: Vector, bias: Vector, eps: float = 1e-5) -> Matrix:
    """Normalizes each row to zero mean and unit (biased) variance, then applies
    the elementwise affine map.

    Raises:
        ShapeError: If gain or bias length differs from the row width.
    """
    m = np.asarray(m, dtype=np.float64)
    gain = np.asarray(gain, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if gain.shape != (m.shape[1],) or bias.shape != (m.shape[1],):
        raise ShapeError(
            f"layernorm over width {m.shape[1]} got gain {gain.shape} and bias {bias.shape}"
        )
    mu = m.mean(axis=1, keepdims=True)
    centered = m - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + eps) * gain + bias


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(m: Matrix) -> Matrix:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * m * (1.0 + np.tanh(_GELU_C * (m + 0.044715 * m**3)))
