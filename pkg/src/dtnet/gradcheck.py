"""Central-difference gradient checks for every backward pass in the package.

Errors are reported as ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``
over the checked entries, i.e. relative to the scale of the gradient being
checked.  Entry-wise ratios are meaningless for entries that are zero up to
rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import samplers
from .model import NetConfig, SegNet, localization_forward
from .nn import Conv2d, Dense, Layer, MaxPool2, ReLU, Tanh, Upsample2, softmax_xent
from .tps import GridMapper, MappedGrid, build_delta, regular_fiducials

EPS = 1e-5


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x`` (perturbed in place).

    With ``indices`` (flat positions) only those entries are computed and a
    1-D array in the same order is returned.
    """
    flat = x.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = []
    for i in idx:
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * eps))
    out = np.array(out)
    return out.reshape(x.shape) if indices is None else out


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    skipped: int = 0  # entries left out because the difference step crossed a kink

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _jitter_off_kinks(coords: np.ndarray, margin: float = 0.01) -> np.ndarray:
    """Push coordinates at least ``margin`` away from integers."""
    frac = coords - np.floor(coords)
    frac = np.clip(frac, margin, 1.0 - margin)
    return np.floor(coords) + frac


def _layer_checks(layer, x: np.ndarray, rng: np.random.Generator, name: str, tol: float):
    """Check input and parameter gradients of ``sum(proj * layer(x))``."""
    out = layer.forward(x)
    proj = rng.normal(size=out.shape)

    def loss():
        return float(np.sum(proj * layer.forward(x)))

    layer.forward(x)
    d_in = layer.backward(proj)
    results = [CheckResult(f"{name}/input", rel_error(d_in, numeric_grad(loss, x)), tol)]
    for key, p in layer.params.items():
        layer.forward(x)
        layer.backward(proj)
        analytic = layer.grads[key].copy()
        results.append(CheckResult(f"{name}/{key}", rel_error(analytic, numeric_grad(loss, p)), tol))
    return results


def check_conv(rng, tol=1e-6):
    layer = Conv2d(2, 3, rng)
    layer.params["b"][...] = rng.normal(size=3)
    return _layer_checks(layer, rng.normal(size=(4, 4, 2)), rng, "conv3x3", tol)


def check_conv1x1(rng, tol=1e-6):
    layer = Conv2d(3, 2, rng, ksize=1)
    return _layer_checks(layer, rng.normal(size=(4, 4, 3)), rng, "conv1x1", tol)


def check_maxpool(rng, tol=1e-6):
    # distinct values spaced well beyond eps keep the argmax stable
    x = rng.permutation(32).reshape(4, 4, 2).astype(np.float64) * 0.1
    return _layer_checks(MaxPool2(), x, rng, "maxpool2", tol)


def check_upsample(rng, tol=1e-6):
    return _layer_checks(Upsample2(), rng.normal(size=(3, 2, 2)), rng, "upsample2", tol)


def check_relu(rng, tol=1e-6):
    x = rng.normal(size=(3, 3, 2))
    x[np.abs(x) < 1e-3] = 0.5
    return _layer_checks(ReLU(), x, rng, "relu", tol)


def check_tanh(rng, tol=1e-6):
    return _layer_checks(Tanh(), rng.normal(size=(3, 3, 2)), rng, "tanh", tol)


def check_dense(rng, tol=1e-6):
    layer = Dense(6, 4, rng, activation="tanh")
    layer.params["b"][...] = rng.normal(size=4) * 0.5
    return _layer_checks(layer, rng.normal(size=6), rng, "dense_tanh", tol)


def check_softmax_xent(rng, tol=1e-6):
    logits = rng.normal(size=(3, 3, 4))
    labels = rng.integers(0, 4, size=(3, 3))
    _, d, _ = softmax_xent(logits, labels)
    num = numeric_grad(lambda: softmax_xent(logits, labels)[0], logits)
    return [CheckResult("softmax_xent/logits", rel_error(d, num), tol)]


def _grid(coords: np.ndarray, h_out, w_out, h_in, w_in) -> MappedGrid:
    return MappedGrid(h_out, w_out, h_in, w_in, coords)


def check_gather(rng, tol=1e-6):
    u = rng.normal(size=(5, 5, 2))
    coords = _jitter_off_kinks(rng.uniform(-0.5, 4.5, size=(7, 2)))
    d_v = rng.normal(size=(1, 7, 2))

    def loss():
        return float(np.sum(d_v * samplers.gather_forward(u, _grid(coords, 1, 7, 5, 5))))

    d_u, d_coords = samplers.gather_backward(u, _grid(coords, 1, 7, 5, 5), d_v)
    return [
        CheckResult("gather/input", rel_error(d_u, numeric_grad(loss, u)), tol),
        CheckResult("gather/coords", rel_error(d_coords, numeric_grad(loss, coords)), tol),
    ]


def check_scatter(rng, tol=1e-6):
    v = rng.normal(size=(4, 4, 2))
    ys, xs = np.meshgrid(np.arange(4.0), np.arange(4.0), indexing="ij")
    base = np.stack([xs.ravel(), ys.ravel()], axis=1)
    coords = _jitter_off_kinks(np.clip(base + rng.uniform(-0.45, 0.45, size=base.shape), 0.05, 2.95))
    d_u = rng.normal(size=(4, 4, 2))

    def grid():
        return _grid(coords, 4, 4, 4, 4)

    def loss():
        return float(np.sum(d_u * samplers.scatter_forward(v, grid(), 4, 4).out))

    res = samplers.scatter_forward(v, grid(), 4, 4)
    d_v, d_coords = samplers.scatter_backward(v, grid(), res, d_u)
    return [
        CheckResult("scatter/input", rel_error(d_v, numeric_grad(loss, v)), tol),
        CheckResult("scatter/coords", rel_error(d_coords, numeric_grad(loss, coords)), tol),
    ]


def check_tps(rng, tol=1e-6):
    k = 16
    f_out = regular_fiducials(k)
    f_in = f_out * 0.8 + rng.uniform(-0.1, 0.1, size=f_out.shape)
    mapper = GridMapper(build_delta(f_out), 6, 5, 7, 8)
    proj = rng.normal(size=(30, 2))

    def loss():
        return float(np.sum(proj * mapper.forward(f_in)[1].coords))

    return [CheckResult("tps/fiducials", rel_error(mapper.backward(proj), numeric_grad(loss, f_in)), tol)]


def _perturbed_dtn(rng, size=16, seed=0) -> SegNet:
    cfg = NetConfig(model="dtn", levels=3, channels=(4, 6, 8), k_fiducials=16, seed=seed,
                    loc_channels=4, loc_hidden=8)
    net = SegNet(cfg, (size, size))
    loc = net.pair.loc
    loc.reset_to_identity(0.85 * regular_fiducials(16))
    loc.head.params["w"][...] = rng.normal(scale=0.1, size=loc.head.params["w"].shape)
    _perturb(net, rng)
    return net


def _perturb(net: SegNet, rng) -> None:
    """Randomize the output head and every bias except the loc head's.

    Trunk conv weights are doubled; with Glorot scales and four channels the
    deepest features otherwise shrink until the warp barely moves the loss.
    """
    net.head.params["w"][...] = rng.normal(scale=0.3, size=net.head.params["w"].shape)
    for name, layer in net.named_layers():
        if not name.startswith("loc.") and layer is not net.head:
            layer.params["w"] *= 2.0
        if net.pair is None or layer is not net.pair.loc.head:
            layer.params["b"][...] = rng.normal(scale=0.05, size=layer.params["b"].shape)


def check_localization(rng, tol=1e-6):
    net = _perturbed_dtn(rng)
    loc = net.pair.loc
    u = rng.normal(size=(4, 4, 6))

    def loss():
        return float(np.sum(localization_forward(u, loc).f_in ** 2))

    f = localization_forward(u, loc).f_in
    d_u = loc.backward(2.0 * f.reshape(-1))
    analytic = {(j, k): g.copy() for j, layer in enumerate(loc.layers) for k, g in layer.grads.items()}
    results = [CheckResult("localization/input", rel_error(d_u, numeric_grad(loss, u)), tol)]
    for (j, key), g in analytic.items():
        num = numeric_grad(loss, loc.layers[j].params[key])
        results.append(CheckResult(f"localization/{j}.{key}", rel_error(g, num), tol))
    return results


def check_loc_to_grid(rng, tol=1e-6):
    """Localization net composed with the TPS transform and grid mapping."""
    net = _perturbed_dtn(rng)
    pair = net.pair
    u = rng.normal(size=(pair.h, pair.w, 6))
    proj = rng.normal(size=(pair.h * pair.w, 2))

    def loss():
        return float(np.sum(proj * pair.mapper.forward(localization_forward(u, pair.loc).f_in)[1].coords))

    loss()
    d_u = pair.loc.backward(pair.mapper.backward(proj).reshape(-1))
    head = pair.loc.head
    analytic = {key: head.grads[key].copy() for key in ("w", "b")}
    results = [CheckResult("loc_to_grid/input", rel_error(d_u, numeric_grad(loss, u)), tol)]
    for key, g in analytic.items():
        results.append(CheckResult(f"loc_to_grid/head.{key}", rel_error(g, numeric_grad(loss, head.params[key])), tol))
    return results


def _layers(obj, seen=None):
    """Every Layer reachable from ``obj`` through attributes and lists, in a fixed order."""
    seen = set() if seen is None else seen
    if id(obj) in seen:
        return
    seen.add(id(obj))
    if isinstance(obj, Layer):
        yield obj
    elif isinstance(obj, (list, tuple)):
        for item in obj:
            yield from _layers(item, seen)
    elif type(obj).__module__.startswith("dtnet.") and hasattr(obj, "__dict__"):
        for value in vars(obj).values():
            yield from _layers(value, seen)


def _pattern(net: SegNet) -> bytes:
    """Which linear piece the last forward pass sat on: ReLU masks, pool winners, sampler cells."""
    parts = []
    for layer in _layers(net):
        if isinstance(layer, ReLU):
            parts.append(layer._cached().tobytes())
        elif isinstance(layer, MaxPool2):
            parts.append(layer.argmax.tobytes())
        elif isinstance(layer, Dense) and layer.activation == "relu":
            parts.append((layer._cached()[2] > 0).tobytes())
    if net.pair is not None:
        parts.append(np.floor(net.pair.grid.coords).tobytes())
    return b"".join(parts)


def check_end_to_end(rng, model: str = "dtn", tol=1e-5, n_params: int = 50, prefix: str = ""):
    """Loss gradient of a whole network on a 16x16 input, on a random parameter subset.

    ``prefix`` restricts the subset to parameters whose name starts with it.
    Entries whose difference step changes a ReLU mask, a pool winner or a
    sampler cell are skipped, since the loss has a kink between the two probes.
    """
    if model == "dtn":
        net = _perturbed_dtn(rng)
    else:
        net = SegNet(NetConfig(model="unet", levels=3, channels=(4, 6, 8)), (16, 16))
        _perturb(net, rng)
    image = rng.uniform(size=(16, 16, 1))
    labels = rng.integers(0, 2, size=(16, 16))

    def loss():
        return softmax_xent(net.forward(image), labels)[0]

    net.loss_and_grad(image, labels)
    if net.pair is not None and net.pair.holes.any():
        raise RuntimeError("end-to-end check requires a hole-free scatter")
    base = _pattern(net)
    params = {k: p for k, p in net.parameters().items() if k.startswith(prefix)}
    grads = {k: net.gradients()[k].copy() for k in params}
    sizes = np.array([p.size for p in params.values()])
    names = list(params)
    picks = rng.choice(sizes.sum(), size=min(n_params, sizes.sum()), replace=False)
    offsets = np.cumsum(np.r_[0, sizes])
    analytic, numeric = [], []
    skipped = 0
    for flat_i in np.sort(picks):
        j = int(np.searchsorted(offsets, flat_i, side="right") - 1)
        local = int(flat_i - offsets[j])
        flat = params[names[j]].reshape(-1)
        old = flat[local]
        flat[local] = old + EPS
        fp, crossed = loss(), _pattern(net) != base
        flat[local] = old - EPS
        fm, crossed = loss(), crossed or _pattern(net) != base
        flat[local] = old
        if crossed:
            skipped += 1
            continue
        analytic.append(grads[names[j]].reshape(-1)[local])
        numeric.append((fp - fm) / (2 * EPS))
    label = f"end_to_end/{model}" + (f"[{prefix}*]" if prefix else "")
    return [CheckResult(label, rel_error(analytic, numeric), tol, skipped)]


SUITE = (
    check_conv, check_conv1x1, check_maxpool, check_upsample, check_relu, check_tanh,
    check_dense, check_softmax_xent, check_gather, check_scatter, check_tps,
    check_localization, check_loc_to_grid,
)


def run_suite(seed: int = 0, tol: float = 1e-6) -> list[CheckResult]:
    """Run every layer check and the whole-network checks, all at ``tol``."""
    rng = np.random.default_rng(seed)
    results = []
    for check in SUITE:
        results.extend(check(rng, tol=tol))
    for model in ("unet", "dtn"):
        results.extend(check_end_to_end(rng, model, tol=tol))
    results.extend(check_end_to_end(rng, "dtn", tol=tol, prefix="loc."))
    return results
