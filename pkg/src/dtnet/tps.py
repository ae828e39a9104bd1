"""Thin-plate-spline grid generation.

Coordinates are normalized to [-1, 1] with x along columns and y along rows.
The pixel mapping is align-corners: ``x_pix = (x + 1) / 2 * (W - 1)``.

A transform is fitted by solving the bordered system ``delta @ A = [F.T; 0]``
where ``delta`` depends only on the fixed output fiducials.  The mapped point
for a regular output location ``p`` is ``T @ lift(p)`` with ``T = A.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DimensionError, SingularMatrixError
from .tensor import LUFactors, lu_factor, lu_solve

RIDGE = 1e-8


def radial_basis(d2: np.ndarray) -> np.ndarray:
    """``d2 * ln(d2)`` elementwise, with the limit value 0 at ``d2 == 0``."""
    d2 = np.asarray(d2, dtype=np.float64)
    out = np.zeros_like(d2)
    pos = d2 > 0
    out[pos] = d2[pos] * np.log(d2[pos])
    return out


def _pairwise_d2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sum(diff * diff, axis=-1)


def regular_fiducials(k: int) -> np.ndarray:
    """K points on a sqrt(K) x sqrt(K) lattice over [-1, 1]^2, row-major.

    Returns a (K, 2) array of (x, y) pairs; x varies fastest.
    """
    side = math.isqrt(k) if k >= 0 else 0
    if k < 4 or side * side != k:
        raise ConfigurationError(f"fiducial count must be a perfect square >= 4, got {k}")
    ticks = np.linspace(-1.0, 1.0, side)
    ys, xs = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


@dataclass(frozen=True)
class FiducialSet:
    f_out: np.ndarray
    f_in: np.ndarray

    def __post_init__(self):
        if self.f_out.shape != self.f_in.shape or self.f_out.ndim != 2 or self.f_out.shape[1] != 2:
            raise DimensionError(
                f"fiducial arrays must both be (K, 2), got {self.f_out.shape} and {self.f_in.shape}"
            )
        if np.any(np.abs(self.f_in) > 1.0):
            raise ConfigurationError("f_in coordinates must lie in [-1, 1]")

    @property
    def k(self) -> int:
        return self.f_out.shape[0]


@dataclass(frozen=True)
class DeltaMatrix:
    """The (K+3)x(K+3) bordered TPS system matrix and its LU factors."""

    delta: np.ndarray
    r: np.ndarray
    f_out: np.ndarray
    factors: LUFactors = field(repr=False)

    @property
    def k(self) -> int:
        return self.r.shape[0]


def build_delta(f_out: np.ndarray) -> DeltaMatrix:
    f_out = np.asarray(f_out, dtype=np.float64)
    if f_out.ndim != 2 or f_out.shape[1] != 2:
        raise DimensionError(f"f_out must be (K, 2), got {f_out.shape}")
    k = f_out.shape[0]
    d2 = _pairwise_d2(f_out, f_out)
    off_diag = ~np.eye(k, dtype=bool)
    if np.any(d2[off_diag] == 0.0):
        i, j = np.argwhere((d2 == 0.0) & off_diag)[0]
        raise ConfigurationError(f"duplicate fiducial points at indices {i} and {j}")
    r = radial_basis(d2)

    def assemble(r_block: np.ndarray) -> np.ndarray:
        delta = np.zeros((k + 3, k + 3))
        delta[:k, 0] = 1.0
        delta[:k, 1:3] = f_out
        delta[:k, 3:] = r_block
        delta[k, 3:] = 1.0
        delta[k + 1:, 3:] = f_out.T
        return delta

    delta = assemble(r)
    try:
        factors = lu_factor(delta)
    except SingularMatrixError:
        delta = assemble(r + RIDGE * np.eye(k))
        factors = lu_factor(delta)
    return DeltaMatrix(delta=delta, r=r, f_out=f_out, factors=factors)


@dataclass(frozen=True)
class TpsTransform:
    t: np.ndarray
    fiducials: FiducialSet

    def apply_normalized(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) normalized output points to normalized input points."""
        q = lift_points(points, self.fiducials.f_out)
        return q @ self.t.T


def build_transform(f_in: np.ndarray, delta: DeltaMatrix) -> TpsTransform:
    f_in = np.asarray(f_in, dtype=np.float64)
    fid = FiducialSet(f_out=delta.f_out, f_in=f_in)
    rhs = np.zeros((delta.k + 3, 2))
    rhs[:delta.k] = f_in
    coeffs = lu_solve(delta.factors, rhs)
    return TpsTransform(t=np.ascontiguousarray(coeffs.T), fiducials=fid)


def lift_points(points: np.ndarray, f_out: np.ndarray) -> np.ndarray:
    """Lift (N, 2) points to rows ``[1, x, y, s_1..s_K]``."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    s = radial_basis(_pairwise_d2(points, np.asarray(f_out, dtype=np.float64)))
    return np.concatenate([np.ones((points.shape[0], 1)), points, s], axis=1)


def lift_point(p, f_out: np.ndarray) -> np.ndarray:
    return lift_points(np.asarray(p, dtype=np.float64)[None, :], f_out)[0]


def normalized_grid(h: int, w: int) -> np.ndarray:
    """Row-major (h*w, 2) array of align-corners normalized pixel centers."""
    ys, xs = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def denormalize(points: np.ndarray, h: int, w: int) -> np.ndarray:
    scale = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    return (points + 1.0) * scale


@dataclass(frozen=True)
class MappedGrid:
    h_out: int
    w_out: int
    h_in: int
    w_in: int
    coords: np.ndarray  # (h_out*w_out, 2) source (x, y) in input pixels

    def __post_init__(self):
        if self.coords.shape != (self.h_out * self.w_out, 2):
            raise DimensionError(
                f"coords shape {self.coords.shape} does not match {self.h_out}x{self.w_out} grid"
            )


class GridMapper:
    """Caches the lifted output grid and the ``Q @ delta^-1`` product for one geometry.

    ``forward`` maps fiducials F to pixel coordinates; ``backward`` pulls a
    coordinate gradient back to F through the transposed solve (delta is
    constant, so only the right-hand side ``[F.T; 0]`` carries gradient).
    """

    def __init__(self, delta: DeltaMatrix, h_out: int, w_out: int, h_in: int, w_in: int):
        if min(h_out, w_out, h_in, w_in) < 2:
            raise DimensionError("grid extents must all be >= 2")
        self.delta = delta
        self.h_out, self.w_out, self.h_in, self.w_in = h_out, w_out, h_in, w_in
        self.q = lift_points(normalized_grid(h_out, w_out), delta.f_out)
        self.scale = np.array([(w_in - 1) / 2.0, (h_in - 1) / 2.0])

    def forward(self, f_in: np.ndarray) -> tuple[TpsTransform, MappedGrid]:
        transform = build_transform(f_in, self.delta)
        return transform, self.map(transform)

    def map(self, transform: TpsTransform) -> MappedGrid:
        norm = self.q @ transform.t.T
        return MappedGrid(self.h_out, self.w_out, self.h_in, self.w_in, (norm + 1.0) * self.scale)

    def backward(self, d_coords: np.ndarray) -> np.ndarray:
        d_norm = d_coords * self.scale
        d_coeffs = self.q.T @ d_norm
        d_rhs = lu_solve(self.delta.factors, d_coeffs, transpose=True)
        return d_rhs[:self.delta.k]


def map_grid(t: TpsTransform, h_out: int, w_out: int, h_in: int, w_in: int) -> MappedGrid:
    if min(h_out, w_out, h_in, w_in) < 2:
        raise DimensionError("grid extents must all be >= 2")
    norm = t.apply_normalized(normalized_grid(h_out, w_out))
    return MappedGrid(h_out, w_out, h_in, w_in, denormalize(norm, h_in, w_in))
