"""Dense float64 tensors and the small linear-algebra kernels the TPS code needs.

Tensors are plain ``numpy.ndarray`` values in float64, row-major.  Feature
maps are laid out as (H, W, C); batch size is always one so the batch axis
is dropped.  The linear solver is a hand-written LU with partial pivoting so
that singular pivots can be reported by index and the same factorization can
be reused for transposed solves during backpropagation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, SingularMatrixError

PIVOT_TOL = 1e-12


def as_tensor(data, shape: Sequence[int] | None = None) -> np.ndarray:
    """Return ``data`` as a contiguous float64 array of rank 1..4.

    If ``shape`` is given, ``data`` is treated as a flat row-major buffer.
    """
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if arr.size != int(np.prod(shape)):
            raise DimensionError(f"data length {arr.size} does not match shape {shape}")
        arr = arr.reshape(shape)
    if not 1 <= arr.ndim <= 4:
        raise DimensionError(f"tensor rank must be 1..4, got shape {arr.shape}")
    if any(s < 1 for s in arr.shape):
        raise DimensionError(f"tensor extents must be >= 1, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def _require_rank2(x: np.ndarray, name: str) -> None:
    if x.ndim != 2:
        raise DimensionError(f"{name} must be rank 2, got shape {x.shape}")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _require_rank2(a, "a")
    _require_rank2(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return a @ b


@dataclass(frozen=True)
class LUFactors:
    """Packed LU factors of a square matrix with row permutation ``perm``.

    ``lu`` holds L below the diagonal (unit diagonal implied) and U on and
    above it, so that ``a[perm] == L @ U``.
    """

    lu: np.ndarray
    perm: np.ndarray

    @property
    def n(self) -> int:
        return self.lu.shape[0]


def lu_factor(a: np.ndarray, tol: float = PIVOT_TOL) -> LUFactors:
    a = np.asarray(a, dtype=np.float64)
    _require_rank2(a, "a")
    n, m = a.shape
    if n != m:
        raise DimensionError(f"matrix must be square, got shape {a.shape}")
    lu = a.copy()
    perm = np.arange(n)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) < tol:
            raise SingularMatrixError(k, lu[p, k])
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return LUFactors(lu, perm)


def lu_solve(factors: LUFactors, b: np.ndarray, transpose: bool = False) -> np.ndarray:
    """Solve ``a x = b`` (or ``a.T x = b`` when ``transpose``) from LU factors."""
    b = np.asarray(b, dtype=np.float64)
    vector = b.ndim == 1
    if vector:
        b = b[:, None]
    _require_rank2(b, "b")
    n = factors.n
    if b.shape[0] != n:
        raise DimensionError(f"right-hand side has {b.shape[0]} rows, matrix is {n}x{n}")
    lu = factors.lu
    if not transpose:
        y = b[factors.perm].copy()
        for i in range(1, n):
            y[i] -= lu[i, :i] @ y[:i]
        for i in range(n - 1, -1, -1):
            y[i] = (y[i] - lu[i, i + 1:] @ y[i + 1:]) / lu[i, i]
        x = y
    else:
        # a[perm] = L U  =>  a.T = U.T L.T P, solve U.T z = b, L.T w = z, x[perm] = w
        z = b.copy()
        for i in range(n):
            z[i] = (z[i] - lu[:i, i] @ z[:i]) / lu[i, i]
        for i in range(n - 2, -1, -1):
            z[i] -= lu[i + 1:, i] @ z[i + 1:]
        x = np.empty_like(z)
        x[factors.perm] = z
    return x[:, 0] if vector else x


def solve_linear(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``a x = b`` by Gaussian elimination with partial pivoting.

    Raises :class:`SingularMatrixError` carrying the failing pivot index when
    a pivot magnitude drops below 1e-12.
    """
    b = np.asarray(b, dtype=np.float64)
    _require_rank2(b, "b")
    a = np.asarray(a, dtype=np.float64)
    _require_rank2(a, "a")
    if a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix must be square, got shape {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise DimensionError(f"cannot solve shapes {a.shape} and {b.shape}")
    return lu_solve(lu_factor(a), b)
