"""Layers with hand-written forward and backward passes.

Every layer works on a single example laid out as (H, W, C) (or a flat
vector for :class:`Dense`).  ``forward`` caches what ``backward`` needs, so a
layer instance must see ``forward`` before each ``backward``.  Parameter
gradients are written to ``layer.grads`` under the same keys as
``layer.params``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, DimensionError


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Conv2d(Layer):
    """Same-padded k x k cross-correlation (k odd), weights (k, k, Cin, Cout)."""

    kind = "conv"

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, ksize: int = 3):
        super().__init__()
        if ksize % 2 != 1:
            raise ConfigurationError(f"kernel size must be odd, got {ksize}")
        self.c_in, self.c_out, self.ksize = c_in, c_out, ksize
        fan_in, fan_out = ksize * ksize * c_in, ksize * ksize * c_out
        self.params["w"] = glorot_uniform(rng, (ksize, ksize, c_in, c_out), fan_in, fan_out)
        self.params["b"] = np.zeros(c_out)

    def forward(self, x):
        if x.ndim != 3 or x.shape[2] != self.c_in:
            raise DimensionError(f"conv expects (H, W, {self.c_in}) input, got {x.shape}")
        h, w, _ = x.shape
        k, pad = self.ksize, self.ksize // 2
        xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        # (H, W, C, k, k) -> (H*W, k*k*C) in (ky, kx, c) order to match the weight layout
        win = sliding_window_view(xp, (k, k), axis=(0, 1))
        cols = win.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * self.c_in)
        self._cache = (x.shape, cols)
        out = cols @ self.params["w"].reshape(-1, self.c_out) + self.params["b"]
        return out.reshape(h, w, self.c_out)

    def backward(self, d_out):
        shape, cols = self._cached()
        h, w, c = shape
        k, pad = self.ksize, self.ksize // 2
        d = d_out.reshape(h * w, self.c_out)
        wmat = self.params["w"].reshape(-1, self.c_out)
        self.grads["w"] = (cols.T @ d).reshape(self.params["w"].shape)
        self.grads["b"] = d.sum(axis=0)
        d_cols = (d @ wmat.T).reshape(h, w, k, k, c)
        d_xp = np.zeros((h + 2 * pad, w + 2 * pad, c))
        for ky in range(k):
            for kx in range(k):
                d_xp[ky:ky + h, kx:kx + w] += d_cols[:, :, ky, kx]
        return d_xp[pad:pad + h, pad:pad + w]


def conv3x3(c_in: int, c_out: int, rng: np.random.Generator) -> Conv2d:
    return Conv2d(c_in, c_out, rng, ksize=3)


class MaxPool2(Layer):
    kind = "maxpool2"

    def forward(self, x):
        h, w, c = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"max-pool needs even extents, got {x.shape}")
        blocks = x.reshape(h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3).reshape(h // 2, w // 2, c, 4)
        arg = np.argmax(blocks, axis=-1)  # first max in row-major (dy, dx) order
        self._cache = (x.shape, arg)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    @property
    def argmax(self) -> np.ndarray:
        return self._cached()[1]

    def backward(self, d_out):
        shape, arg = self._cached()
        h, w, c = shape
        blocks = np.zeros((h // 2, w // 2, c, 4))
        np.put_along_axis(blocks, arg[..., None], d_out[..., None], axis=-1)
        return blocks.reshape(h // 2, w // 2, c, 2, 2).transpose(0, 3, 1, 4, 2).reshape(h, w, c)


class Upsample2(Layer):
    kind = "upsample2"

    def forward(self, x):
        self._cache = x.shape
        return np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)

    def backward(self, d_out):
        h, w, c = self._cached()
        return d_out.reshape(h, 2, w, 2, c).sum(axis=(1, 3))


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0.0)

    def backward(self, d_out):
        return np.where(self._cached(), d_out, 0.0)


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x):
        y = np.tanh(x)
        self._cache = y
        return y

    def backward(self, d_out):
        y = self._cached()
        return d_out * (1.0 - y * y)


class Dense(Layer):
    """Affine map on the flattened input, weights (D, M), optional tanh or relu."""

    kind = "dense"

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, activation: str | None = None):
        super().__init__()
        if activation not in (None, "tanh", "relu"):
            raise ConfigurationError(f"unknown activation {activation!r}")
        self.d_in, self.d_out, self.activation = d_in, d_out, activation
        self.params["w"] = glorot_uniform(rng, (d_in, d_out), d_in, d_out)
        self.params["b"] = np.zeros(d_out)

    def forward(self, x):
        flat = x.reshape(-1)
        if flat.size != self.d_in:
            raise DimensionError(f"dense expects {self.d_in} inputs, got shape {x.shape}")
        z = flat @ self.params["w"] + self.params["b"]
        if self.activation == "tanh":
            y = np.tanh(z)
        elif self.activation == "relu":
            y = np.maximum(z, 0.0)
        else:
            y = z
        self._cache = (x.shape, flat, z, y)
        return y

    def backward(self, d_out):
        shape, flat, z, y = self._cached()
        if self.activation == "tanh":
            dz = d_out * (1.0 - y * y)
        elif self.activation == "relu":
            dz = np.where(z > 0, d_out, 0.0)
        else:
            dz = d_out
        self.grads["w"] = np.outer(flat, dz)
        self.grads["b"] = dz.copy()
        return (self.params["w"] @ dz).reshape(shape)


def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean per-pixel softmax cross-entropy over an (H, W, L) logit map.

    Returns ``(loss, d_logits, probs)``.
    """
    if logits.ndim != 3 or labels.shape != logits.shape[:2]:
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    n_classes = logits.shape[2]
    lab = np.asarray(labels)
    bad = (lab < 0) | (lab >= n_classes) | (lab != np.round(lab))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"label {lab[r, c]} at pixel ({r}, {c}) outside [0, {n_classes})")
    lab = lab.astype(np.int64)
    shifted = logits - logits.max(axis=2, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=2, keepdims=True))
    log_p = shifted - log_z
    probs = np.exp(log_p)
    n_pix = lab.size
    picked = np.take_along_axis(log_p, lab[..., None], axis=2)[..., 0]
    loss = -picked.sum() / n_pix
    d = probs.copy()
    np.put_along_axis(d, lab[..., None], np.take_along_axis(d, lab[..., None], axis=2) - 1.0, axis=2)
    return float(loss), d / n_pix, probs


@dataclass(frozen=True)
class SgdConfig:
    learning_rate: float = 0.1
    seed: int = 0
    clip_norm: float | None = None  # global gradient-norm cap applied by the training step

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {self.learning_rate}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigurationError(f"clip_norm must be positive, got {self.clip_norm}")


def clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    """Rescale every gradient by one factor so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {name: g * scale for name, g in grads.items()}


def sgd_step(params: dict, grads: dict, cfg: SgdConfig) -> dict:
    out = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(p) != np.shape(g):
            raise DimensionError(f"gradient for {name!r} has shape {np.shape(g)}, param {np.shape(p)}")
        out[name] = p - cfg.learning_rate * g
    return out
