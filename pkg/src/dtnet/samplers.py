"""Bilinear gather and normalized bilinear scatter on (H, W, C) feature maps.

Both kernels use the tent weight ``max(0, 1 - |x - m|) * max(0, 1 - |y - n|)``
between a sample point ``(x, y)`` and grid node ``(n, m)``.  Gather reads the
four nodes around each sample; scatter writes each sample onto the four nodes
around it and divides by the accumulated weight ``S``.  Nodes outside the map
receive and contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .tps import MappedGrid

HOLE_TOL = 1e-12


@dataclass(frozen=True)
class _Taps:
    """Flat node indices, weights and weight derivatives for the 4 taps of each point.

    All arrays are (N, 4); out-of-bounds taps carry zero weight and index 0.
    """

    index: np.ndarray
    weight: np.ndarray
    d_wx: np.ndarray
    d_wy: np.ndarray


def _taps(coords: np.ndarray, h: int, w: int) -> _Taps:
    x = coords[:, 0]
    y = coords[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    # per axis: (node offset, tent weight, d tent / d coord)
    # the lower node's derivative is -1 except at the kink m == x where it is 0
    ax = [(0, 1.0 - fx, np.where(fx > 0, -1.0, 0.0)), (1, fx, np.where(fx > 0, 1.0, 0.0))]
    ay = [(0, 1.0 - fy, np.where(fy > 0, -1.0, 0.0)), (1, fy, np.where(fy > 0, 1.0, 0.0))]
    index, weight, d_wx, d_wy = [], [], [], []
    for oy, wy, gy in ay:
        for ox, wx, gx in ax:
            n = y0 + oy
            m = x0 + ox
            inside = (n >= 0) & (n <= h - 1) & (m >= 0) & (m <= w - 1)
            idx = np.where(inside, n * w + m, 0).astype(np.int64)
            index.append(idx)
            weight.append(np.where(inside, wx * wy, 0.0))
            d_wx.append(np.where(inside, gx * wy, 0.0))
            d_wy.append(np.where(inside, wx * gy, 0.0))
    return _Taps(*(np.stack(a, axis=1) for a in (index, weight, d_wx, d_wy)))


def _check_grid_input(u: np.ndarray, grid: MappedGrid) -> None:
    if u.ndim != 3:
        raise DimensionError(f"feature map must be (H, W, C), got shape {u.shape}")
    if u.shape[:2] != (grid.h_in, grid.w_in):
        raise DimensionError(
            f"feature map extents {u.shape[:2]} do not match grid input extents "
            f"{(grid.h_in, grid.w_in)}"
        )


def gather_forward(u: np.ndarray, grid: MappedGrid) -> np.ndarray:
    _check_grid_input(u, grid)
    h, w, c = u.shape
    taps = _taps(grid.coords, h, w)
    flat = u.reshape(h * w, c)
    v = np.einsum("nk,nkc->nc", taps.weight, flat[taps.index])
    return v.reshape(grid.h_out, grid.w_out, c)


def _gather_coord_grad(flat: np.ndarray, taps: _Taps) -> tuple[np.ndarray, np.ndarray]:
    """Per-point, per-channel derivative of a gathered value w.r.t. x and y."""
    vals = flat[taps.index]
    return (
        np.einsum("nk,nkc->nc", taps.d_wx, vals),
        np.einsum("nk,nkc->nc", taps.d_wy, vals),
    )


def _accumulate(taps: _Taps, values: np.ndarray, size: int) -> np.ndarray:
    """Sum ``weight * values`` into ``size`` nodes in point-index order."""
    c = values.shape[1]
    out = np.zeros((size, c))
    contrib = taps.weight[:, :, None] * values[:, None, :]
    np.add.at(out, taps.index.ravel(), contrib.reshape(-1, c))
    return out


def gather_backward(u: np.ndarray, grid: MappedGrid, d_v: np.ndarray):
    """Return ``(d_u, d_coords)`` for :func:`gather_forward`.

    ``d_coords`` is (N, 2) holding (dx, dy) per sample point.
    """
    _check_grid_input(u, grid)
    h, w, c = u.shape
    if d_v.shape != (grid.h_out, grid.w_out, c):
        raise DimensionError(f"d_v shape {d_v.shape} does not match output {(grid.h_out, grid.w_out, c)}")
    taps = _taps(grid.coords, h, w)
    dv = d_v.reshape(-1, c)
    d_u = _accumulate(taps, dv, h * w).reshape(h, w, c)
    gx, gy = _gather_coord_grad(u.reshape(h * w, c), taps)
    d_coords = np.stack([np.sum(gx * dv, axis=1), np.sum(gy * dv, axis=1)], axis=1)
    return d_u, d_coords


@dataclass(frozen=True)
class ScatterResult:
    out: np.ndarray  # (H, W, C)
    s: np.ndarray  # (H, W)
    holes: np.ndarray  # (H, W) bool


def scatter_forward(v: np.ndarray, grid: MappedGrid, h_out: int, w_out: int) -> ScatterResult:
    """Distribute each value of ``v`` onto the nodes around its mapped point and normalize.

    ``grid`` holds one target coordinate per pixel of ``v`` (row-major), in
    the pixel space of the (h_out, w_out) result.
    """
    if v.ndim != 3:
        raise DimensionError(f"feature map must be (H, W, C), got shape {v.shape}")
    if v.shape[:2] != (grid.h_out, grid.w_out):
        raise DimensionError(
            f"feature map extents {v.shape[:2]} do not match grid extents {(grid.h_out, grid.w_out)}"
        )
    if (h_out, w_out) != (grid.h_in, grid.w_in):
        raise DimensionError(
            f"target extents {(h_out, w_out)} do not match grid pixel space {(grid.h_in, grid.w_in)}"
        )
    c = v.shape[2]
    taps = _taps(grid.coords, h_out, w_out)
    s = _accumulate(taps, np.ones((v.shape[0] * v.shape[1], 1)), h_out * w_out)[:, 0]
    num = _accumulate(taps, v.reshape(-1, c), h_out * w_out)
    holes = s < HOLE_TOL
    out = np.zeros_like(num)
    keep = ~holes
    out[keep] = num[keep] / s[keep, None]
    return ScatterResult(out.reshape(h_out, w_out, c), s.reshape(h_out, w_out), holes.reshape(h_out, w_out))


def scatter_backward(v: np.ndarray, grid: MappedGrid, result: ScatterResult, d_u: np.ndarray):
    """Return ``(d_v, d_coords)`` for :func:`scatter_forward`.

    With ``G = dU / S`` and ``dS = -sum_c dU * U / S`` on non-hole nodes:
    ``dV_i = sum_nm w_i,nm G_nm`` and
    ``dx_i = sum_nm (sum_c G_nm V_i + dS_nm) dw_i,nm/dx``.
    Hole nodes pass no gradient.
    """
    h, w, c = result.out.shape
    if d_u.shape != result.out.shape:
        raise DimensionError(f"d_u shape {d_u.shape} does not match result {result.out.shape}")
    if v.shape != (grid.h_out, grid.w_out, c) or (grid.h_in, grid.w_in) != (h, w):
        raise DimensionError("scatter result does not match the given input and grid")
    keep = ~result.holes
    s_safe = np.where(keep, result.s, 1.0)
    g = np.where(keep[..., None], d_u / s_safe[..., None], 0.0)
    d_s = np.where(keep, -np.sum(g * result.out, axis=2), 0.0)

    taps = _taps(grid.coords, h, w)
    g_flat = g.reshape(h * w, c)
    d_v = np.einsum("nk,nkc->nc", taps.weight, g_flat[taps.index])
    gx, gy = _gather_coord_grad(g_flat, taps)
    sx, sy = _gather_coord_grad(d_s.reshape(h * w, 1), taps)
    vf = v.reshape(-1, c)
    d_coords = np.stack(
        [np.sum(gx * vf, axis=1) + sx[:, 0], np.sum(gy * vf, axis=1) + sy[:, 0]], axis=1
    )
    return d_v.reshape(v.shape), d_coords


def fill_holes(result: ScatterResult) -> np.ndarray:
    """Fill hole nodes with the S-weighted mean of their non-hole 3x3 neighbours.

    Runs in passes; a node filled in one pass becomes a donor in the next with
    weight equal to the mean weight of its own donors.  An all-hole map stays
    zero.
    """
    out = result.out.copy()
    weight = np.where(result.holes, 0.0, result.s)
    holes = result.holes.copy()
    h, w = holes.shape
    while holes.any() and not holes.all():
        pad_w = np.pad(weight, 1)
        pad_v = np.pad(out * weight[..., None], ((1, 1), (1, 1), (0, 0)))
        pad_valid = np.pad(~holes, 1)
        wsum = np.zeros((h, w))
        vsum = np.zeros_like(out)
        count = np.zeros((h, w))
        for dy in range(3):
            for dx in range(3):
                if dy == 1 and dx == 1:
                    continue
                wsum += pad_w[dy:dy + h, dx:dx + w]
                vsum += pad_v[dy:dy + h, dx:dx + w]
                count += pad_valid[dy:dy + h, dx:dx + w]
        fill = holes & (count > 0)
        out[fill] = vsum[fill] / wsum[fill, None]
        weight[fill] = wsum[fill] / count[fill]
        holes &= ~fill
    return out
