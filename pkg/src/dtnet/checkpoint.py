"""Checkpoint container: a NumPy ``.npz`` archive.

Layout: ``__format__`` (version string), ``__config__`` (NetConfig JSON),
``__meta__`` (JSON with input extents and step count) and one float64 array
per named parameter.  Arrays are stored raw, so loading is bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .model import NetConfig, SegNet

FORMAT = "dtnet-checkpoint-v1"


def save_checkpoint(path, net: SegNet, step: int = 0) -> Path:
    path = Path(path)
    meta = {"input_hw": list(net.input_hw), "step": int(step)}
    arrays = {name: np.asarray(p, dtype=np.float64) for name, p in net.parameters().items()}
    with open(path, "wb") as fh:
        np.savez(
            fh,
            __format__=np.array(FORMAT),
            __config__=np.array(net.cfg.to_json()),
            __meta__=np.array(json.dumps(meta)),
            **arrays,
        )
    return path


def load_checkpoint(path) -> tuple[SegNet, dict]:
    path = Path(path)
    with np.load(path, allow_pickle=False) as z:
        fmt = str(z["__format__"])
        if fmt != FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {fmt!r}")
        cfg = NetConfig.from_json(str(z["__config__"]))
        meta = json.loads(str(z["__meta__"]))
        params = {k: z[k] for k in z.files if not k.startswith("__")}
    net = SegNet(cfg, tuple(meta["input_hw"]))
    expected = set(net.parameters())
    if set(params) != expected:
        missing = sorted(expected - set(params))
        extra = sorted(set(params) - expected)
        raise ValueError(f"{path}: parameter names mismatch (missing {missing}, unexpected {extra})")
    net.set_parameters(params)
    return net, meta
