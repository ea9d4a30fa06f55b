"""Dense linear algebra helpers shared by the model, protocol and attacks.

Everything here is a pure function of its inputs. Randomness comes from an
explicit seed so that callers control reproducibility.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Relative singular-value cutoff used for every rank decision in the package.
RANK_RTOL = 1e-10


class NumericError(ValueError):
    """Raised on malformed numeric input (shape mismatch, NaN, Inf)."""


@dataclass(frozen=True)
class SolveReport:
    solution: np.ndarray
    residual_norm: float
    rank: int
    unique: bool


def as_vec(values, name: str = "vector") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 1:
        raise NumericError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def as_mat(values, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2:
        raise NumericError(f"{name} must be two-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} contains non-finite entries")
    return arr


def rank_tolerance_check(columns, rtol: float = RANK_RTOL) -> int:
    """Numerical rank: singular values above ``rtol * sigma_max`` are counted.

    A zero matrix has rank 0 regardless of the threshold.
    """
    mat = as_mat(columns, "columns")
    if mat.size == 0:
        raise NumericError("rank of an empty matrix is undefined")
    sv = np.linalg.svd(mat, compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


def solve_linear_combination(columns, target, rtol: float = RANK_RTOL) -> SolveReport:
    """Find coefficients ``c`` with ``columns @ c ~= target``.

    ``columns`` has one unknown per column. The solve is a truncated-SVD least
    squares; ``unique`` is true exactly when the numerical rank equals the
    number of unknowns. When the system is rank deficient the minimum-norm
    solution is still returned so callers can inspect it.
    """
    mat = as_mat(columns, "columns")
    rhs = as_vec(target, "target")
    rows, unknowns = mat.shape
    if rows < 1 or unknowns < 1:
        raise NumericError("need at least one equation and one unknown")
    if rhs.shape[0] != rows:
        raise NumericError(
            f"dimension mismatch: columns have {rows} rows but target has {rhs.shape[0]}"
        )
    u, sv, vt = np.linalg.svd(mat, full_matrices=False)
    if sv[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(sv > rtol * sv[0]))
    inv = np.zeros_like(sv)
    inv[:rank] = 1.0 / sv[:rank]
    solution = vt.T @ (inv * (u.T @ rhs))
    residual = float(np.linalg.norm(mat @ solution - rhs))
    return SolveReport(solution=solution, residual_norm=residual, rank=rank, unique=rank == unknowns)


def clip_norms(mat: np.ndarray, axis: int) -> np.ndarray:
    """Divide each slice along ``axis`` by ``max(1, norm)`` so every norm is at most 1."""
    norms = np.linalg.norm(mat, axis=axis, keepdims=True)
    return mat / np.maximum(1.0, norms)


def sample_continuous(rows: int, cols: int, rng_seed) -> np.ndarray:
    """Standard-normal ``rows x cols`` matrix whose columns have norm below 1.

    Columns are the sample vectors, each mapped ``x -> x / (1 + ||x||)``. The
    map keeps directions and is a smooth bijection onto the open unit ball, so
    the law stays continuous; clipping would put atoms at +-1 when ``rows = 1``.
    """
    if rows < 1 or cols < 1:
        raise NumericError("rows and cols must be positive")
    rng = np.random.default_rng(rng_seed)
    x = rng.standard_normal((rows, cols))
    return x / (1.0 + np.linalg.norm(x, axis=0, keepdims=True))
