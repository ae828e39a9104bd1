"""Static PNG rendering of a DTN's predicted fiducials and the warp they induce."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import save_png, to_uint8
from .model import SegNet
from .samplers import gather_forward
from .tps import map_grid

GRID_LINES = 8


def _to_pixels(points: np.ndarray, h: int, w: int) -> np.ndarray:
    return (points + 1.0) / 2.0 * np.array([w - 1, h - 1])


def deformed_lines(net: SegNet, h: int, w: int, n_lines: int = GRID_LINES) -> list[np.ndarray]:
    """Polylines (in image pixels) of a regular lattice pushed through the last transform."""
    t = net.shared_t
    ticks = np.linspace(-1.0, 1.0, n_lines + 1)
    dense = np.linspace(-1.0, 1.0, 4 * n_lines + 1)
    lines = []
    for v in ticks:
        for pts in (np.stack([dense, np.full_like(dense, v)], 1), np.stack([np.full_like(dense, v), dense], 1)):
            lines.append(_to_pixels(t.apply_normalized(pts), h, w))
    return lines


def render_warp_demo(net: SegNet, image: np.ndarray, out_dir) -> dict:
    """Run ``net`` on ``image`` and write overlay, warped-image and fiducial files.

    The image is resized to the network input if needed; drawings use the
    original image extents.
    """
    out_dir = Path(out_dir)
    h, w = image.shape[:2]
    gray = image.mean(axis=2, keepdims=True) if image.shape[2] != net.cfg.in_channels else image
    net_in = gray
    if (h, w) != net.input_hw:
        pil = Image.fromarray(to_uint8(gray[..., 0])).resize(net.input_hw[::-1], Image.BILINEAR)
        net_in = np.asarray(pil, dtype=np.float64)[..., None] / 255.0
    net.forward(net_in)
    fid = net.shared_t.fiducials

    rgb = np.repeat(image, 3, axis=2) if image.shape[2] == 1 else image[..., :3]
    canvas = Image.fromarray(to_uint8(rgb), mode="RGB")
    draw = ImageDraw.Draw(canvas)
    for line in deformed_lines(net, h, w):
        draw.line([tuple(p) for p in line], fill=(255, 200, 0), width=1)
    for (x, y) in _to_pixels(fid.f_out, h, w):
        draw.point((x, y), fill=(0, 255, 0))
    for (x, y) in _to_pixels(fid.f_in, h, w):
        draw.point((x, y), fill=(255, 0, 0))
    overlay = out_dir / "warp_overlay.png"
    canvas.save(overlay)

    grid = map_grid(net.shared_t, h, w, h, w)
    warped = gather_forward(image, grid)
    warped_path = out_dir / "warp_gathered.png"
    save_png(warped, warped_path)

    disp = float(np.max(np.abs(fid.f_in - fid.f_out)))
    fid_path = out_dir / "fiducials.json"
    fid_path.write_text(json.dumps({
        "f_out": fid.f_out.tolist(), "f_in": fid.f_in.tolist(), "max_displacement": disp,
    }, indent=1))
    return {"overlay": overlay, "warped": warped_path, "fiducials": fid_path, "max_displacement": disp}
