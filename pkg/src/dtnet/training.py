"""Training, evaluation and timing loops on streamed synthetic samples."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import gen_blobs, save_png
from .metrics import MetricsWriter, confusion_matrix, iou_from_confusion, roc_auc
from .errors import UndefinedMetricError
from .model import NetConfig, SegNet, train_step
from .nn import SgdConfig, softmax_xent

DEFAULT_LR = 0.2
DEFAULT_SHAPES = 3
DEFAULT_CLIP = 1.0

_TRAIN_STREAM = 0
_EVAL_STREAM = 1


def sample_seed(seed: int, stream: int, index: int) -> int:
    """Deterministic per-sample seed; training and held-out streams never collide."""
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1)[0])


def train_sample(seed: int, step: int, size: int, n_shapes: int = DEFAULT_SHAPES):
    return gen_blobs(sample_seed(seed, _TRAIN_STREAM, step), size, size, n_shapes)


def heldout_sample(seed: int, index: int, size: int, n_shapes: int = DEFAULT_SHAPES):
    return gen_blobs(sample_seed(seed, _EVAL_STREAM, index), size, size, n_shapes)


class _Window:
    """Pools losses, confusion counts and boundary scores between CSV rows."""

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.reset()

    def reset(self):
        self.losses = []
        self.conf = np.zeros((self.n_classes, self.n_classes), dtype=np.int64)
        self.scores = []
        self.truth = []

    def add(self, loss: float, probs: np.ndarray, labels: np.ndarray):
        self.losses.append(loss)
        self.conf += confusion_matrix(np.argmax(probs, axis=2), labels, self.n_classes)
        self.scores.append(probs[..., 1].ravel())
        self.truth.append((labels == 1).ravel())

    def summary(self) -> dict:
        try:
            auc = roc_auc(np.concatenate(self.scores), np.concatenate(self.truth))[1]
        except UndefinedMetricError:
            auc = float("nan")
        return {
            "loss": float(np.mean(self.losses)),
            "accuracy": float(np.trace(self.conf) / self.conf.sum()),
            "mean_iou": iou_from_confusion(self.conf),
            "auc": auc,
        }


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    checkpoint: Path | None = None
    metrics_csv: Path | None = None
    net: SegNet | None = None


def train(model: str, seed: int, steps: int, size: int, out_dir=None, lr: float = DEFAULT_LR,
          n_shapes: int = DEFAULT_SHAPES, log_every: int = 10, run_id: str | None = None,
          clip_norm: float | None = DEFAULT_CLIP, log=None) -> TrainResult:
    """Train a fresh network on streamed samples.

    A CSV row is written after step 1 and then every ``log_every`` steps (and
    after the last step); each row pools the steps since the previous row.
    Losses are the pre-update losses of each step.
    """
    cfg = NetConfig(model=model, seed=seed)
    net = SegNet(cfg, (size, size))
    sgd = SgdConfig(learning_rate=lr, seed=seed, clip_norm=clip_norm)
    run_id = run_id or f"{model}-s{seed}"
    result = TrainResult(net=net)
    writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.metrics_csv = out_dir / "metrics.csv"
        writer = MetricsWriter(result.metrics_csv)
    window = _Window(cfg.classes)
    try:
        for step in range(1, steps + 1):
            sample = train_sample(seed, step, size, n_shapes)
            loss, probs = train_step(net, sample.image, sample.labels, sgd)
            if not np.isfinite(loss):
                raise FloatingPointError(f"loss became non-finite at step {step}")
            result.losses.append(loss)
            window.add(loss, probs, sample.labels)
            if step == 1 or step % log_every == 0 or step == steps:
                row = {"run_id": run_id, "step": step, **window.summary()}
                result.rows.append(row)
                if writer:
                    writer.write(**row)
                if log:
                    log(f"step {step:5d}  loss {row['loss']:.4f}  acc {row['accuracy']:.4f}  "
                        f"miou {row['mean_iou']:.4f}  auc {row['auc']:.4f}")
                window.reset()
    finally:
        if writer:
            writer.close()
    if out_dir is not None:
        result.checkpoint = save_checkpoint(out_dir / "checkpoint.npz", net, step=steps)
        save_predictions(net, heldout_sample(seed, 0, size, n_shapes), out_dir)
    return result


def save_predictions(net: SegNet, sample, out_dir) -> None:
    out_dir = Path(out_dir)
    probs = net.predict(sample.image)
    save_png(sample.image, out_dir / "pred_input.png")
    save_png(sample.labels.astype(np.float64), out_dir / "pred_truth.png")
    save_png(probs[..., 1], out_dir / "pred_boundary_prob.png")
    save_png((np.argmax(probs, axis=2) == 1).astype(np.float64), out_dir / "pred_labels.png")


def evaluate(net: SegNet, n: int, seed: int, n_shapes: int = DEFAULT_SHAPES) -> dict:
    """Metrics pooled over ``n`` held-out samples (loss is the per-sample mean)."""
    size = net.input_hw[0]
    window = _Window(net.cfg.classes)
    for i in range(n):
        sample = heldout_sample(seed, i, size, n_shapes)
        logits = net.forward(sample.image)
        loss, _, probs = softmax_xent(logits, sample.labels)
        window.add(loss, probs, sample.labels)
    return window.summary()


def bench(size: int = 64, iters: int = 100, seed: int = 0) -> dict:
    """Mean forward+backward seconds per step for U-Net and DTN at equal config."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(size=(size, size, 1))
    labels = rng.integers(0, 2, size=(size, size))
    times = {}
    for model in ("unet", "dtn"):
        net = SegNet(NetConfig(model=model, seed=seed), (size, size))
        net.loss_and_grad(image, labels)  # warm-up
        start = time.perf_counter()
        for _ in range(iters):
            net.loss_and_grad(image, labels)
        times[model] = (time.perf_counter() - start) / iters
    times["ratio"] = times["dtn"] / times["unet"]
    return times
