"""Dense matrix arithmetic, LU-based inversion and diagonal-dominance checks.

All values are contiguous row-major numpy arrays in single or double
precision.  Mixed-precision behaviour is controlled by a PrecisionScheme:
"double" keeps everything in float64, "float" keeps everything in float32,
and "float-double" stores model tensors (activations, weights) in float32
while transform matrices and any product involving them are computed in
float64 and the model-side result truncated back to float32.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

EPS_GUARD = 1e-30


class PrecisionScheme(enum.Enum):
    DOUBLE = "double"
    FLOAT = "float"
    FLOAT_DOUBLE = "float-double"

    @property
    def model_dtype(self) -> np.dtype:
        """Storage dtype for activations, weights and biases."""
        return np.dtype(np.float64 if self is PrecisionScheme.DOUBLE else np.float32)

    @property
    def transform_dtype(self) -> np.dtype:
        """Storage dtype for transform matrices and their inverses."""
        return np.dtype(np.float32 if self is PrecisionScheme.FLOAT else np.float64)

    @property
    def compute_dtype(self) -> np.dtype:
        """Working dtype for inversion and transform-side products."""
        return np.dtype(np.float32 if self is PrecisionScheme.FLOAT else np.float64)


@dataclass(frozen=True)
class InversionDiagnostics:
    pivot_min_abs: float
    condition_estimate: float  # ||M||_1 * ||M^-1||_1
    reconstruction_error: float  # ||M @ M^-1 - I||_F


class SingularMatrixError(ValueError):
    """Matrix is singular at working precision."""

    def __init__(self, pivot: float, threshold: float):
        self.pivot = pivot
        self.threshold = threshold
        super().__init__(
            f"singular to working precision: |pivot| {pivot:.3e} "
            f"below threshold {threshold:.3e}"
        )


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-major matrix product in the operand precision."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ValueError(f"mixed precision: {a.dtype} x {b.dtype}")
    return a @ b


def scheme_matmul(
    a: np.ndarray,
    b: np.ndarray,
    scheme: PrecisionScheme,
    transform_side: bool = False,
) -> np.ndarray:
    """Matrix product under a precision scheme.

    transform_side marks products with a transform matrix (or its inverse);
    under float-double those are promoted to float64 and the result is
    truncated back to the model dtype.
    """
    if transform_side:
        c = a.astype(scheme.compute_dtype, copy=False) @ b.astype(
            scheme.compute_dtype, copy=False
        )
        return c.astype(scheme.model_dtype, copy=False)
    d = scheme.model_dtype
    return a.astype(d, copy=False) @ b.astype(d, copy=False)


def frobenius_norm_sq(m: np.ndarray) -> float:
    return float(np.sum(np.asarray(m, dtype=np.float64) ** 2))


def relative_fro_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||_F / max(||a||_F, eps)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    denom = max(np.sqrt(frobenius_norm_sq(a)), EPS_GUARD)
    return float(np.sqrt(frobenius_norm_sq(diff)) / denom)


def is_strictly_diagonally_dominant(m: np.ndarray) -> bool:
    """True iff |m_ii| > sum_{j != i} |m_ij| for every row."""
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got {m.shape}")
    absm = np.abs(np.asarray(m, dtype=np.float64))
    diag = np.diag(absm)
    off = absm.sum(axis=1) - diag
    return bool(np.all(diag > off))


def lu_invert(
    m: np.ndarray, scheme: PrecisionScheme = PrecisionScheme.DOUBLE
) -> tuple[np.ndarray, InversionDiagnostics]:
    """Invert a square matrix by LU with partial pivoting.

    The factorization runs in the scheme's compute dtype; the result is
    returned in the scheme's transform dtype.  Raises SingularMatrixError
    when the smallest pivot falls below 1e3 * machine-eps * ||M||_F.
    """
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got {m.shape}")
    work = np.ascontiguousarray(m, dtype=scheme.compute_dtype)
    eps = float(np.finfo(scheme.compute_dtype).eps)
    threshold = 1e3 * eps * np.sqrt(frobenius_norm_sq(work))
    with warnings.catch_warnings():
        # exactly-zero pivots are reported through SingularMatrixError below
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(work, check_finite=False)
    pivots = np.abs(np.diag(lu))
    pivot_min = float(pivots.min()) if pivots.size else 0.0
    if pivot_min < threshold:
        raise SingularMatrixError(pivot_min, threshold)
    inv = lu_solve(
        (lu, piv),
        np.eye(work.shape[0], dtype=scheme.compute_dtype),
        check_finite=False,
    )
    recon = work.astype(np.float64) @ inv.astype(np.float64)
    recon -= np.eye(work.shape[0])
    diag = InversionDiagnostics(
        pivot_min_abs=pivot_min,
        condition_estimate=float(
            np.abs(work).sum(axis=0).max() * np.abs(inv).sum(axis=0).max()
        ),
        reconstruction_error=float(np.sqrt(np.sum(recon**2))),
    )
    return inv.astype(scheme.transform_dtype, copy=False), diag


def random_sdd_matrix(
    rng: np.random.Generator, n: int, dtype=np.float64
) -> np.ndarray:
    """Random matrix made strictly diagonally dominant.

    Off-diagonals are standard normal; the diagonal is set to
    1 + row-abs-sum so every row dominates with margin 1.
    """
    a = rng.standard_normal((n, n))
    off = np.abs(a).sum(axis=1) - np.abs(np.diag(a))
    a[np.diag_indices(n)] = 1.0 + off
    return a.astype(dtype, copy=False)
