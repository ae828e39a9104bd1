"""U-Net baseline and the dense transformer network built on it.

The transformer pair sits at one encoder level and its mirror in the decoder.
On the way down, the feature map entering that level is resampled with a
bilinear gather through a TPS transform predicted by a localization network.
On the way up, the output of the matching decoder level is pushed back through
the *same* mapped grid with the normalized scatter, so that every later
feature map, and the logits, line up with the input pixels again.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import samplers
from .errors import ConfigurationError, DimensionError
from .nn import (Conv2d, Dense, Layer, MaxPool2, ReLU, SgdConfig, Upsample2, clip_by_global_norm, conv3x3,
                 sgd_step, softmax_xent)
from .tps import FiducialSet, GridMapper, MappedGrid, TpsTransform, build_delta, regular_fiducials

# keeps atanh finite for the +-1 lattice coordinates at identity init
IDENTITY_MARGIN = 1e-9


@dataclass(frozen=True)
class NetConfig:
    model: str = "dtn"
    in_channels: int = 1
    levels: int = 3
    channels: tuple[int, ...] = (8, 16, 32)
    classes: int = 2
    k_fiducials: int = 16
    insert_level: int | None = None
    loc_channels: int = 8
    loc_hidden: int = 32
    background_bias: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.model not in ("unet", "dtn"):
            raise ConfigurationError(f"model must be 'unet' or 'dtn', got {self.model!r}")
        if self.levels < 1 or len(self.channels) != self.levels:
            raise ConfigurationError(
                f"channels {self.channels} must have one entry per level ({self.levels})"
            )
        if self.insert_level is None:
            object.__setattr__(self, "insert_level", self.levels - 1)
        if not 0 <= self.insert_level < self.levels:
            raise ConfigurationError(f"insert_level {self.insert_level} outside [0, {self.levels})")
        regular_fiducials(self.k_fiducials)  # validates the count
        if self.classes < 2:
            raise ConfigurationError("need at least two classes")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetConfig":
        return cls(**json.loads(text))


class LocalizationNet:
    """conv-relu-pool x2, dense-relu, dense-tanh producing 2K coordinates."""

    def __init__(self, c_in: int, h: int, w: int, k: int, rng: np.random.Generator,
                 channels: int = 8, hidden: int = 32):
        if h % 4 or w % 4:
            raise ConfigurationError(f"localization input {h}x{w} must be divisible by 4")
        self.k = k
        self.layers: list[Layer] = [
            conv3x3(c_in, channels, rng), ReLU(), MaxPool2(),
            conv3x3(channels, channels, rng), ReLU(), MaxPool2(),
            Dense(channels * (h // 4) * (w // 4), hidden, rng, activation="relu"),
            Dense(hidden, 2 * k, rng, activation="tanh"),
        ]
        self.reset_to_identity(regular_fiducials(k))

    @property
    def head(self) -> Dense:
        return self.layers[-1]

    def reset_to_identity(self, f_out: np.ndarray) -> None:
        """Zero the last layer's weights and set its bias so that F = f_out."""
        target = np.clip(f_out.reshape(-1), -1 + IDENTITY_MARGIN, 1 - IDENTITY_MARGIN)
        self.head.params["w"][...] = 0.0
        self.head.params["b"][...] = np.arctanh(target)

    def forward(self, u: np.ndarray) -> np.ndarray:
        x = u
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        d = d_out
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d


def localization_forward(u: np.ndarray, loc_net: LocalizationNet) -> FiducialSet:
    out = loc_net.forward(u)
    if out.shape != (2 * loc_net.k,):
        raise ConfigurationError(f"localization output width {out.size} != 2K = {2 * loc_net.k}")
    f_out = regular_fiducials(loc_net.k)
    return FiducialSet(f_out=f_out, f_in=out.reshape(loc_net.k, 2))


class TransformerPair:
    """Encoder gather and decoder scatter sharing one TPS transform per forward pass."""

    def __init__(self, c_in: int, h: int, w: int, cfg: NetConfig, rng: np.random.Generator):
        self.h, self.w = h, w
        self.loc = LocalizationNet(c_in, h, w, cfg.k_fiducials, rng, cfg.loc_channels, cfg.loc_hidden)
        self.delta = build_delta(regular_fiducials(cfg.k_fiducials))
        self.mapper = GridMapper(self.delta, h, w, h, w)
        self.frozen_fiducials: np.ndarray | None = None
        self.shared_t: TpsTransform | None = None
        self.grid: MappedGrid | None = None
        self.fill_holes = True
        self._u_in = None
        self._v_dec = None
        self._scatter = None
        self._d_coords = None

    # encoder side
    def forward_encoder(self, u: np.ndarray) -> np.ndarray:
        if u.shape[:2] != (self.h, self.w):
            raise DimensionError(f"transformer built for {self.h}x{self.w}, got {u.shape[:2]}")
        if self.frozen_fiducials is not None:
            f_in = self.frozen_fiducials
        else:
            f_in = localization_forward(u, self.loc).f_in
        self.shared_t, self.grid = self.mapper.forward(f_in)
        self._u_in = u
        self._d_coords = np.zeros_like(self.grid.coords)
        return samplers.gather_forward(u, self.grid)

    def backward_encoder(self, d_v: np.ndarray) -> np.ndarray:
        d_u, d_coords = samplers.gather_backward(self._u_in, self.grid, d_v)
        d_coords = d_coords + self._d_coords
        if self.frozen_fiducials is None:
            d_f = self.mapper.backward(d_coords)
            d_u = d_u + self.loc.backward(d_f.reshape(-1))
        else:
            for layer in self.loc.layers:
                layer.grads.clear()
        return d_u

    # decoder side
    def forward_decoder(self, v: np.ndarray) -> np.ndarray:
        if self.grid is None:
            raise RuntimeError("decoder transformer used before the encoder side")
        self._v_dec = v
        self._scatter = samplers.scatter_forward(v, self.grid, self.h, self.w)
        if self.fill_holes:
            return samplers.fill_holes(self._scatter)
        return self._scatter.out

    def backward_decoder(self, d_u: np.ndarray) -> np.ndarray:
        d_v, d_coords = samplers.scatter_backward(self._v_dec, self.grid, self._scatter, d_u)
        self._d_coords = self._d_coords + d_coords
        return d_v

    @property
    def holes(self) -> np.ndarray:
        return self._scatter.holes


class _ConvBlock:
    """Two conv3x3+ReLU layers."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.layers = [conv3x3(c_in, c_out, rng), ReLU(), conv3x3(c_out, c_out, rng), ReLU()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, d):
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return d


class SegNet:
    """U-Net (``model='unet'``) or U-Net with a transformer pair (``model='dtn'``).

    The U-Net weights are drawn from one RNG stream and the localization
    network from another, so a U-Net and a DTN built with the same seed share
    every common weight.
    """

    def __init__(self, cfg: NetConfig, input_hw: tuple[int, int]):
        self.cfg = cfg
        h, w = input_hw
        div = 2 ** (cfg.levels - 1)
        if h % div or w % div:
            raise ConfigurationError(f"input {h}x{w} not divisible by 2^(levels-1) = {div}")
        self.input_hw = (h, w)
        base_seq, loc_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        rng = np.random.default_rng(base_seq)
        ch = cfg.channels
        self.enc = [_ConvBlock(cfg.in_channels if i == 0 else ch[i - 1], ch[i], rng) for i in range(cfg.levels)]
        self.pools = [MaxPool2() for _ in range(cfg.levels - 1)]
        self.ups = [Upsample2() for _ in range(cfg.levels - 1)]
        self.upconvs = [_UpConv(ch[i + 1], ch[i], rng) for i in range(cfg.levels - 1)]
        self.dec = [_ConvBlock(2 * ch[i], ch[i], rng) for i in range(cfg.levels - 1)]
        self.head = Conv2d(ch[0], cfg.classes, rng, ksize=1)
        # untrained nets lean towards class 0 (background) by more than their logit spread
        self.head.params["b"][0] = cfg.background_bias
        self.pair: TransformerPair | None = None
        if cfg.model == "dtn":
            lvl = cfg.insert_level
            c_in = cfg.in_channels if lvl == 0 else ch[lvl - 1]
            self.pair = TransformerPair(c_in, h >> lvl, w >> lvl, cfg, np.random.default_rng(loc_seq))
        self._splits: list[int] = []

    @property
    def shared_t(self) -> TpsTransform | None:
        return self.pair.shared_t if self.pair else None

    def named_layers(self):
        for i, blk in enumerate(self.enc):
            yield f"enc{i}.conv0", blk.layers[0]
            yield f"enc{i}.conv1", blk.layers[2]
        for i in range(len(self.dec)):
            yield f"up{i}.conv", self.upconvs[i].conv
            yield f"dec{i}.conv0", self.dec[i].layers[0]
            yield f"dec{i}.conv1", self.dec[i].layers[2]
        yield "head", self.head
        if self.pair is not None:
            for j, layer in enumerate(self.pair.loc.layers):
                if layer.params:
                    yield f"loc.{j}", layer

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.named_layers() for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        """Gradients from the last backward pass; zeros for parameters it did not reach."""
        return {
            f"{n}.{k}": layer.grads.get(k, np.zeros_like(p))
            for n, layer in self.named_layers() for k, p in layer.params.items()
        }

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for n, layer in self.named_layers():
            for k, p in layer.params.items():
                new = np.asarray(values[f"{n}.{k}"], dtype=np.float64)
                if new.shape != p.shape:
                    raise DimensionError(f"parameter {n}.{k}: shape {new.shape} != {p.shape}")
                p[...] = new

    def forward(self, image: np.ndarray) -> np.ndarray:
        if image.ndim == 2:
            image = image[..., None]
        if image.shape != (*self.input_hw, self.cfg.in_channels):
            raise DimensionError(
                f"expected input {(*self.input_hw, self.cfg.in_channels)}, got {image.shape}"
            )
        cfg = self.cfg
        lvl = cfg.insert_level if self.pair else -1
        top = cfg.levels - 1
        x = image
        skips = []
        for i in range(cfg.levels):
            if i > 0:
                x = self.pools[i - 1].forward(x)
            if i == lvl:
                x = self.pair.forward_encoder(x)
            x = self.enc[i].forward(x)
            if i < top:
                skips.append(x)
        if lvl == top:
            x = self.pair.forward_decoder(x)
        self._splits = []
        for i in range(top - 1, -1, -1):
            x = self.upconvs[i].forward(self.ups[i].forward(x))
            self._splits.append(x.shape[2])
            x = self.dec[i].forward(np.concatenate([x, skips[i]], axis=2))
            if i == lvl:
                x = self.pair.forward_decoder(x)
        return self.head.forward(x)

    def backward(self, d_logits: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        lvl = cfg.insert_level if self.pair else -1
        top = cfg.levels - 1
        d = self.head.backward(d_logits)
        d_skips = [None] * top
        for i in range(top):
            if i == lvl:
                d = self.pair.backward_decoder(d)
            d = self.dec[i].backward(d)
            split = self._splits[top - 1 - i]
            d_skips[i] = d[..., split:]
            d = self.ups[i].backward(self.upconvs[i].backward(d[..., :split]))
        if lvl == top:
            d = self.pair.backward_decoder(d)
        for i in range(top, -1, -1):
            if i < top:
                d = d + d_skips[i]
            d = self.enc[i].backward(d)
            if i == lvl:
                d = self.pair.backward_encoder(d)
            if i > 0:
                d = self.pools[i - 1].backward(d)
        return d

    def loss_and_grad(self, image: np.ndarray, labels: np.ndarray):
        logits = self.forward(image)
        loss, d_logits, probs = softmax_xent(logits, labels)
        self.backward(d_logits)
        return loss, probs

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Class probabilities (H, W, L)."""
        logits = self.forward(image)
        z = logits - logits.max(axis=2, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=2, keepdims=True)


class _UpConv:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = conv3x3(c_in, c_out, rng)
        self.relu = ReLU()

    def forward(self, x):
        return self.relu.forward(self.conv.forward(x))

    def backward(self, d):
        return self.conv.backward(self.relu.backward(d))


def build_model(cfg: NetConfig, input_hw: tuple[int, int]) -> SegNet:
    return SegNet(cfg, input_hw)


def train_step(net: SegNet, image: np.ndarray, labels: np.ndarray, cfg: SgdConfig):
    """One SGD step; returns ``(loss, probs)`` evaluated before the update."""
    if labels.shape != net.input_hw:
        raise DimensionError(f"labels {labels.shape} do not match input extents {net.input_hw}")
    loss, probs = net.loss_and_grad(image, labels)
    grads = net.gradients()
    if cfg.clip_norm is not None:
        grads = clip_by_global_norm(grads, cfg.clip_norm)
    net.set_parameters(sgd_step(net.parameters(), grads, cfg))
    return loss, probs
