"""Synthetic boundary-segmentation samples and PNG I/O."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

NOISE_SIGMA = 0.05


@dataclass(frozen=True)
class Sample:
    image: np.ndarray  # (H, W, 1) float64 in [0, 1]
    labels: np.ndarray  # (H, W) int64, 1 = boundary
    seed: int


def _region_boundary(region: np.ndarray) -> np.ndarray:
    """Pixels whose region id differs from a 4-neighbour (a 2-px band along each contour)."""
    edge = np.zeros(region.shape, dtype=bool)
    diff_v = region[1:, :] != region[:-1, :]
    diff_h = region[:, 1:] != region[:, :-1]
    edge[1:, :] |= diff_v
    edge[:-1, :] |= diff_v
    edge[:, 1:] |= diff_h
    edge[:, :-1] |= diff_h
    return edge


def gen_blobs(seed: int, h: int = 32, w: int = 32, n_shapes: int = 3) -> Sample:
    """Render ``n_shapes`` random shaded ellipses plus Gaussian noise.

    Later ellipses occlude earlier ones.  Labels mark the visible contours.
    """
    if h < 16 or w < 16:
        raise ValueError(f"sample extents must be >= 16, got {h}x{w}")
    rng = np.random.default_rng(seed)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    gx, gy = rng.uniform(-0.1, 0.1, size=2)
    image = rng.uniform(0.15, 0.35) + gx * (xs / w - 0.5) + gy * (ys / h - 0.5)
    region = np.zeros((h, w), dtype=np.int64)
    scale = min(h, w)
    for k in range(n_shapes):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        ay, ax = rng.uniform(0.12, 0.3, size=2) * scale
        theta = rng.uniform(0.0, np.pi)
        level = rng.uniform(0.55, 0.9)
        shade = rng.uniform(-0.15, 0.15, size=2)
        c, s = np.cos(theta), np.sin(theta)
        u = ((xs - cx) * c + (ys - cy) * s) / ax
        v = (-(xs - cx) * s + (ys - cy) * c) / ay
        inside = u * u + v * v <= 1.0
        body = level + shade[0] * u + shade[1] * v
        image = np.where(inside, body, image)
        region[inside] = k + 1
    image = image + rng.normal(0.0, NOISE_SIGMA, size=(h, w))
    image = np.clip(image, 0.0, 1.0)
    labels = _region_boundary(region).astype(np.int64)
    return Sample(image=image[..., None], labels=labels, seed=seed)


def load_png(path) -> np.ndarray:
    """Load an 8-bit grayscale or RGB PNG as (H, W, C) float64 in [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P", "CMYK") else "L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise OSError(f"no such image file: {path}") from exc
    except (UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise OSError(f"malformed PNG: {path}: {exc}") from exc
    return arr[..., None] if arr.ndim == 2 else arr


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(tensor: np.ndarray, path) -> None:
    """Save an (H, W), (H, W, 1) or (H, W, 3) array in [0, 1] as an 8-bit PNG."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    if not (arr.ndim == 2 or (arr.ndim == 3 and arr.shape[2] == 3)):
        raise ValueError(f"cannot save array of shape {arr.shape} as PNG")
    Image.fromarray(to_uint8(arr)).save(Path(path), format="PNG")


def write_dataset(directory, samples) -> list[Path]:
    """Write numbered ``NNNN_image.png`` / ``NNNN_label.png`` pairs; labels stored as raw ids."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for i, sample in enumerate(samples):
        save_png(sample.image, directory / f"{i:04d}_image.png")
        Image.fromarray(sample.labels.astype(np.uint8)).save(directory / f"{i:04d}_label.png")
        written.append(directory / f"{i:04d}_image.png")
    return written


def read_dataset(directory) -> list[tuple[np.ndarray, np.ndarray]]:
    directory = Path(directory)
    pairs = []
    for image_path in sorted(directory.glob("*_image.png")):
        label_path = image_path.with_name(image_path.name.replace("_image", "_label"))
        with Image.open(label_path) as im:
            labels = np.asarray(im, dtype=np.int64)
        pairs.append((load_png(image_path), labels))
    return pairs
