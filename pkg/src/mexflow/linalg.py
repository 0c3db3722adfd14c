"""Small dense linear algebra: LU with partial pivoting, determinants, solves.

Sized for the channel-mixing matrices of the flow (n up to a few dozen);
clarity over BLAS-level speed.
"""

from __future__ import annotations

import numpy as np


class SingularMatrixError(ValueError):
    """Matrix is numerically singular; carries a pivot/scale report."""


def lu_factor(a: np.ndarray):
    """Return (lu, piv, sign): combined L\\U factors, row pivots, permutation sign.

    Raises SingularMatrixError when a pivot is negligible relative to the
    matrix scale.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ValueError(f"square matrix required, got {a.shape}")
    lu = a.copy()
    piv = np.arange(n)
    sign = 1.0
    scale = np.abs(a).max() if n else 0.0
    tiny = max(scale, 1.0) * n * np.finfo(np.float64).eps
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) <= tiny:
            raise SingularMatrixError(
                f"pivot {abs(lu[p, k]):.3e} at column {k} below threshold {tiny:.3e} "
                f"(matrix max-abs {scale:.3e})"
            )
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            piv[[k, p]] = piv[[p, k]]
            sign = -sign
        lu[k + 1 :, k] /= lu[k, k]
        lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    return lu, piv, sign


def slogdet(a: np.ndarray):
    """(sign, log|det|) via LU."""
    lu, _, sign = lu_factor(a)
    d = np.diag(lu)
    sign *= np.prod(np.sign(d))
    return float(sign), float(np.sum(np.log(np.abs(d))))


def lu_solve(lu: np.ndarray, piv: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A x = b given lu_factor output; b is a vector or matrix of columns."""
    n = lu.shape[0]
    x = np.asarray(b, dtype=np.float64)[piv].copy()
    for k in range(1, n):  # forward: L y = Pb (unit diagonal)
        x[k] -= lu[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):  # backward: U x = y
        x[k] -= lu[k, k + 1 :] @ x[k + 1 :]
        x[k] /= lu[k, k]
    return x


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lu, piv, _ = lu_factor(a)
    return lu_solve(lu, piv, b)


def inverse(a: np.ndarray) -> np.ndarray:
    return solve(a, np.eye(a.shape[0]))


def plu_decompose(a: np.ndarray):
    """Explicit P, L, U with P @ L @ U = a (P a permutation matrix)."""
    lu, piv, _ = lu_factor(a)
    n = lu.shape[0]
    lower = np.tril(lu, -1) + np.eye(n)
    upper = np.triu(lu)
    perm = np.zeros((n, n))
    perm[piv, np.arange(n)] = 1.0
    return perm, lower, upper


def solve_triangular(a: np.ndarray, b: np.ndarray, lower: bool, unit_diagonal: bool = False) -> np.ndarray:
    """Solve a triangular system; b is a vector or matrix of columns."""
    n = a.shape[0]
    x = np.asarray(b, dtype=np.float64).copy()
    order = range(n) if lower else range(n - 1, -1, -1)
    for k in order:
        if lower:
            x[k] -= a[k, :k] @ x[:k]
        else:
            x[k] -= a[k, k + 1 :] @ x[k + 1 :]
        if not unit_diagonal:
            x[k] /= a[k, k]
    return x
