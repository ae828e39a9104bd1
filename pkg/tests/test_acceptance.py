"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python3 tests/test_acceptance.py``.
The training criteria (7, 8) take a few minutes on one core.
"""

import time

import numpy as np
import pytest

from dtnet import gradcheck
from dtnet.checkpoint import load_checkpoint
from dtnet.cli import main
from dtnet.metrics import read_metrics
from dtnet.model import NetConfig, SegNet
from dtnet.samplers import gather_forward, scatter_forward
from dtnet.tps import build_delta, build_transform, map_grid, regular_fiducials
from dtnet.training import bench, evaluate, train
from oracles import grid, pixel_grid, random_affine, tent_weight_matrix


def report(capsys, number, title, ok, detail):
    with capsys.disabled():
        print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} | {detail}")
    assert ok, detail


def test_1_gradient_suite(capsys):
    start = time.perf_counter()
    results = gradcheck.run_suite(seed=0, tol=1e-6)
    elapsed = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    worst = max(results, key=lambda r: r.error)
    covered = {r.name.split("/")[0] for r in results}
    needed = {"conv3x3", "maxpool2", "upsample2", "dense_tanh", "softmax_xent", "gather", "scatter",
              "tps", "localization", "loc_to_grid"}
    ok = not failed and elapsed < 10.0 and needed <= covered and all(r.tol <= 1e-6 for r in results)
    report(capsys, 1, "finite-difference gradient suite", ok,
           f"{len(results)} checks, worst {worst.name} {worst.error:.2e} < 1e-6, {elapsed:.1f}s < 10s"
           + (f", failed {failed}" if failed else "")
           + (f", missing {sorted(needed - covered)}" if needed - covered else ""))


def test_2_tps_interpolation(capsys):
    rng = np.random.default_rng(2)
    f_out = regular_fiducials(16)
    delta = build_delta(f_out)
    worst = 0.0
    for _ in range(100):
        f_in = rng.uniform(-1.0, 1.0, size=(16, 2))
        t = build_transform(f_in, delta)
        worst = max(worst, float(np.max(np.abs(t.apply_normalized(f_out) - f_in))))
    report(capsys, 2, "TPS interpolates the fiducials", worst < 1e-8,
           f"100 draws, K=16, max error {worst:.2e} < 1e-8")


def test_3_affine_reproduction(capsys):
    rng = np.random.default_rng(3)
    f_out = regular_fiducials(16)
    delta = build_delta(f_out)
    h, w = 12, 10
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    worst = 0.0
    for _ in range(50):
        a, b = random_affine(rng, f_out)
        g = map_grid(build_transform(f_out @ a.T + b, delta), h, w, h, w)
        expect = (pts @ a.T + b + 1.0) / 2.0 * np.array([w - 1, h - 1])
        worst = max(worst, float(np.max(np.abs(g.coords - expect))))
    report(capsys, 3, "affine maps are reproduced", worst < 1e-6,
           f"50 affine draws, {h}x{w} grid, max error {worst:.2e} px < 1e-6")


def test_4_sampler_oracle(capsys):
    rng = np.random.default_rng(4)
    worst_g = worst_s = worst_n = 0.0
    for _ in range(100):
        coords = rng.uniform(-0.5, 2.5, size=(9, 2))
        mat = tent_weight_matrix(coords, 3, 3)
        g = grid(coords, 3, 3, 3, 3)
        u = rng.normal(size=(3, 3, 2))
        v = rng.normal(size=(3, 3, 2))
        worst_g = max(worst_g, float(np.max(np.abs(gather_forward(u, g).reshape(9, 2) - mat @ u.reshape(9, 2)))))
        res = scatter_forward(v, g, 3, 3)
        s = mat.T @ np.ones(9)
        worst_s = max(worst_s, float(np.max(np.abs(res.s.ravel() - s))))
        keep = s >= 1e-12
        expect = (mat.T @ v.reshape(9, 2))[keep] / s[keep, None]
        worst_n = max(worst_n, float(np.max(np.abs(res.out.reshape(9, 2)[keep] - expect), initial=0.0)))
    worst = max(worst_g, worst_s, worst_n)
    report(capsys, 4, "samplers match the brute-force weight matrix", worst < 1e-10,
           f"gather {worst_g:.1e}, S {worst_s:.1e}, normalized scatter {worst_n:.1e} (< 1e-10)")


def test_5_identity_reduction(capsys):
    rng = np.random.default_rng(5)
    unet = SegNet(NetConfig(model="unet", seed=5), (32, 32))
    dtn = SegNet(NetConfig(model="dtn", seed=5), (32, 32))
    out_err = max(float(np.max(np.abs(dtn.forward(x) - unet.forward(x))))
                  for x in rng.uniform(size=(5, 32, 32, 1)))
    u = rng.normal(size=(8, 8, 3))
    exact = grid(pixel_grid(8, 8), 8, 8, 8, 8)
    round_trip = scatter_forward(gather_forward(u, exact), exact, 8, 8).out
    bit_exact = bool(np.array_equal(round_trip, u))
    f = regular_fiducials(16)
    solved = map_grid(build_transform(f, build_delta(f)), 8, 8, 8, 8)
    solved_err = float(np.max(np.abs(scatter_forward(gather_forward(u, solved), solved, 8, 8).out - u)))
    ok = out_err < 1e-6 and bit_exact and solved_err < 1e-12
    report(capsys, 5, "identity DTN equals the U-Net", ok,
           f"output diff {out_err:.1e} < 1e-6; scatter(gather) on identity coords bit-exact={bit_exact}; "
           f"through the solved identity T {solved_err:.1e}")


def test_6_constant_preservation(capsys):
    rng = np.random.default_rng(6)
    worst = 0.0
    holes = 0
    for _ in range(100):
        c = rng.uniform(-50, 50)
        coords = rng.uniform(-1.0, 6.0, size=(25, 2))
        res = scatter_forward(np.full((5, 5, 3), c), grid(coords, 5, 5, 6, 6), 6, 6)
        holes += int(res.holes.sum())
        worst = max(worst, float(np.max(np.abs(res.out[~res.holes] - c), initial=0.0)))
    report(capsys, 6, "scatter keeps constant maps constant", worst <= 1e-12,
           f"100 random grids, max deviation {worst:.1e} <= 1e-12 ({holes} hole cells excluded)")


def _train_cli(out, model):
    start = time.perf_counter()
    code = main(["train", "--model", model, "--steps", "500", "--size", "32", "--seed", "1", "--out", str(out)])
    return code, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.parametrize("model", ["dtn", "unet"])
def test_7_training_smoke(capsys, tmp_path, model):
    code, elapsed = _train_cli(tmp_path / "a", model)
    code2, _ = _train_cli(tmp_path / "b", model)
    capsys.readouterr()
    rows = read_metrics(tmp_path / "a" / "metrics.csv")
    first, last = float(rows[0]["loss"]), float(rows[-1]["loss"])
    reduction = 1.0 - last / first
    same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    net_a, _ = load_checkpoint(tmp_path / "a" / "checkpoint.npz")
    net_b, _ = load_checkpoint(tmp_path / "b" / "checkpoint.npz")
    pb = net_b.parameters()
    same_weights = all(p.tobytes() == pb[k].tobytes() for k, p in net_a.parameters().items())
    ok = code == code2 == 0 and reduction >= 0.5 and elapsed < 300 and same_csv and same_weights
    report(capsys, 7, f"training smoke ({model})", ok,
           f"loss {first:.4f} -> {last:.4f} ({100 * reduction:.1f}% >= 50%), {elapsed:.1f}s < 300s, "
           f"identical CSV={same_csv}, identical weights={same_weights}")


@pytest.mark.slow
def test_8_dtn_not_worse_than_unet(capsys):
    seeds = range(5)
    scores = {"unet": [], "dtn": []}
    auc = {"unet": [], "dtn": []}
    for model in scores:
        for seed in seeds:
            net = train(model, seed, 500, 32).net
            m = evaluate(net, 50, seed)
            scores[model].append(m["mean_iou"])
            auc[model].append(m["auc"])
    u, d = np.mean(scores["unet"]), np.mean(scores["dtn"])
    report(capsys, 8, "DTN held-out mean-IoU not below U-Net by more than 0.02", d >= u - 0.02,
           f"5 seeds: U-Net {u:.4f}, DTN {d:.4f}, gain {d - u:+.4f}; "
           f"AUC U-Net {np.mean(auc['unet']):.4f}, DTN {np.mean(auc['dtn']):.4f}")


def test_9_overhead(capsys):
    t = bench(size=64, iters=100, seed=0)
    report(capsys, 9, "DTN step-time overhead", 0 < t["ratio"] < 2.0,
           f"U-Net {1e3 * t['unet']:.2f} ms, DTN {1e3 * t['dtn']:.2f} ms, ratio {t['ratio']:.3f} < 2.0")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
