"""Command-line entry point: ``dtnet {gradcheck,train,eval,warp-demo,bench}``.

Exit codes: 0 success, 1 check failure, 2 usage or I/O failure.
The ``DTN_SEED`` environment variable overrides ``--seed``.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .errors import ConfigurationError, DataError


EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageFailure(Exception):
    pass


def _seed(args) -> int:
    env = os.environ.get("DTN_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageFailure(f"DTN_SEED must be an integer, got {env!r}")
    return args.seed


def _load(args, **expect):
    from .checkpoint import load_checkpoint

    path = Path(args.ckpt)
    if not path.is_file():
        raise UsageFailure(f"checkpoint not found: {path}")
    try:
        net, meta = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageFailure(f"cannot read checkpoint {path}: {exc}")
    actual = {"model": net.cfg.model, "size": net.input_hw[0]}
    for name, want in expect.items():
        if want is not None and actual[name] != want:
            raise UsageFailure(f"checkpoint config mismatch: {name} is {actual[name]!r}, expected {want!r}")
    return net, meta


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(seed=_seed(args), tol=args.tol)
    failed = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        note = f"  [{r.skipped} entries at kinks skipped]" if r.skipped else ""
        print(f"{status}  {r.name:<32s} max rel err {r.error:.3e}  (tol {r.tol:.0e}){note}")
        if not r.passed:
            failed.append(r.name)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}")
        return EXIT_CHECK
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import train

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageFailure(f"cannot create output directory {out}: {exc}")
    seed = _seed(args)
    try:
        result = train(args.model, seed, args.steps, args.size, out, lr=args.lr,
                       n_shapes=args.shapes, clip_norm=args.clip or None, log=print)
    except OSError as exc:
        raise UsageFailure(f"I/O failure under {out}: {exc}")
    if result.losses:
        first, last = result.rows[0]["loss"], result.rows[-1]["loss"]
        print(f"initial loss {first:.4f}  final loss {last:.4f}  ({100 * (1 - last / first):.1f}% reduction)")
    print(f"checkpoint: {result.checkpoint}")
    print(f"metrics:    {result.metrics_csv}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import CSV_FIELDS
    from .training import evaluate

    net, meta = _load(args, model=args.model, size=args.size)
    m = evaluate(net, args.n, _seed(args), n_shapes=args.shapes)
    print(f"loss      {m['loss']:.6f}")
    print(f"accuracy  {m['accuracy']:.6f}")
    print(f"mean_iou  {m['mean_iou']:.6f}")
    print(f"auc       {m['auc']:.6f}")
    if args.csv:
        try:
            with open(args.csv, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(CSV_FIELDS)
                w.writerow([f"eval-{net.cfg.model}", meta["step"]] + [f"{m[k]:.10g}" for k in CSV_FIELDS[2:]])
        except OSError as exc:
            raise UsageFailure(f"cannot write {args.csv}: {exc}")
    return EXIT_OK


def cmd_warp_demo(args) -> int:
    from .data import load_png
    from .warp_demo import render_warp_demo

    net, _ = _load(args)
    if net.pair is None:
        raise UsageFailure("checkpoint config mismatch: model is 'unet', expected 'dtn'")
    try:
        image = load_png(args.image)
    except OSError as exc:
        raise UsageFailure(str(exc))
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        info = render_warp_demo(net, image, out)
    except OSError as exc:
        raise UsageFailure(f"I/O failure under {out}: {exc}")
    print(f"max fiducial displacement (normalized): {info['max_displacement']:.6g}")
    for name in ("overlay", "warped", "fiducials"):
        print(f"{name}: {info[name]}")
    return EXIT_OK


def cmd_bench(args) -> int:
    from .training import bench

    t = bench(size=args.size, iters=args.iters, seed=_seed(args))
    print(f"{'model':<8s}{'ms/step':>12s}")
    print(f"{'unet':<8s}{1e3 * t['unet']:>12.3f}")
    print(f"{'dtn':<8s}{1e3 * t['dtn']:>12.3f}")
    print(f"ratio dtn/unet: {t['ratio']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    from .training import DEFAULT_CLIP, DEFAULT_LR, DEFAULT_SHAPES

    parser = argparse.ArgumentParser(prog="dtnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train on streamed synthetic samples")
    p.add_argument("--model", choices=("unet", "dtn"), default="dtn")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--shapes", type=int, default=DEFAULT_SHAPES)
    p.add_argument("--clip", type=float, default=DEFAULT_CLIP,
                   help="global gradient-norm cap per step; 0 disables clipping")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shapes", type=int, default=DEFAULT_SHAPES)
    p.add_argument("--model", choices=("unet", "dtn"), default=None,
                   help="fail unless the checkpoint has this model type")
    p.add_argument("--size", type=int, default=None, help="fail unless the checkpoint has this input size")
    p.add_argument("--csv", default=None, help="also write the metrics row to this CSV file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("warp-demo", help="render the learned fiducials and warped image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_warp_demo)

    p = sub.add_parser("bench", help="time U-Net vs DTN forward+backward")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageFailure, ConfigurationError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
