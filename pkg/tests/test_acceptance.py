"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

import numpy as np
import pytest

from bevfuse.cli import cmd_simulate, cmd_train
from bevfuse.config import build_config, load_config
from bevfuse.fisheye import DEPTH_BANDS_M, default_bands, project, solve_incidence, unproject
from bevfuse.geometry import GridSpec
from bevfuse.io import list_split, load_scene
from bevfuse.metrics import distance_metrics_xy, occupancy_metrics
from bevfuse.nn import tensor as T
from bevfuse.nn.layers import DilationField, adaptive_dilated_conv, gumbel_noise, gumbel_softmax
from bevfuse.nn.model import NetworkConfig
from bevfuse.nn.tensor import Tensor
from bevfuse.sim import SimConfig, closest_range, draw_gap, generate_dataset, sample_scene
from bevfuse.train import TrainConfig, build_network, evaluate, load_samples, predict, train
from bevfuse.ultrasonic import attenuation_weight, default_rear_layout, fill_grid, fill_grid_oracle
from gradcases import CASES
from support import random_frame, random_intrinsics

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(number: int, title: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})", flush=True)
        assert ok, detail

    return emit


def test_c1_mapper_oracle_equivalence(verdict):
    layout = default_rear_layout()
    spec = GridSpec()
    assert len(layout.sensors) == 6 and len(layout.signalways) == 8 and spec.cell_size == 0.05
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        frame = random_frame(layout, rng)
        diff = np.abs(fill_grid(frame, layout, spec).data - fill_grid_oracle(frame, layout, spec).data).max()
        worst = max(worst, float(diff))
    elapsed = time.perf_counter() - start
    verdict(1, "mapper oracle equivalence", worst <= 1e-9 and elapsed < 60.0,
            f"max diff {worst:.2e} over 50 frames in {elapsed:.1f} s")


def test_c2_reference_constants(verdict):
    fid = build_config({"preset": "fidelity"})
    desk = build_config()
    bands = tuple((b.z_min, b.z_max) for b in default_bands())
    h = 0.7
    checks = {
        "grid 600x1200": fid.grid.shape == (600, 1200) and fid.grid.cell_size == 0.01,
        "grid extents": fid.grid.rear_extent == 6.0 and fid.grid.lateral_half_extent == 6.0,
        "bands": bands == ((3.2, 6.0), (1.6, 3.2), (0.8, 1.6), (0.4, 0.8), (0.2, 0.4)) and DEPTH_BANDS_M == bands,
        "beta weight": attenuation_weight(0.0, h) == 1.0 and attenuation_weight(h, h) == 0.0
        and attenuation_weight(-h, h) == 0.0,
        "classes": NetworkConfig.fidelity().num_classes == 2 and desk.network.num_classes == 2,
        "optimiser defaults": all((c.trainer.lr, c.trainer.batch_size, c.trainer.epochs) == (1e-3, 8, 100)
                                  for c in (fid, desk)),
    }
    failed = [k for k, ok in checks.items() if not ok]
    verdict(2, "reference constants", not failed, "all constants match" if not failed else f"mismatch: {failed}")


def test_c3_fisheye_round_trip(verdict):
    worst, max_iter = 0.0, 0
    for seed in range(5):
        intr = random_intrinsics(seed)
        assert all(k != 0 for k in intr.k)
        for u in np.linspace(0, intr.width - 1, 32):
            for v in np.linspace(0, intr.height - 1, 32):
                back = project(unproject((u, v), intr), intr)
                worst = max(worst, abs(back[0] - u), abs(back[1] - v))
                rd = np.hypot((u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy)
                max_iter = max(max_iter, solve_incidence(rd, intr)[1])
    verdict(3, "fisheye round trip", worst <= 1e-6 and max_iter <= 50,
            f"max error {worst:.2e} px, max Newton iterations {max_iter}")


def test_c4_gradient_suite(verdict):
    start = time.perf_counter()
    results = {c.name: (c.run(), c.tol) for c in CASES}
    elapsed = time.perf_counter() - start
    failed = {k: f"{e:.2e}>{t:g}" for k, (e, t) in results.items() if not e <= t}
    worst = max(results.items(), key=lambda kv: kv[1][0] / kv[1][1])
    verdict(4, "gradient suite", not failed and elapsed < 120.0,
            f"{len(results)} cases in {elapsed:.1f} s, worst {worst[0]} {worst[1][0]:.2e}"
            + (f"; failed {failed}" if failed else ""))


def test_c5_camfuse_degeneracy(verdict):
    rng = np.random.default_rng(5)
    bitwise = True
    for d in (1, 2, 3, 4):
        x = Tensor(rng.standard_normal((2, 3, 10, 10)))
        w = Tensor(rng.standard_normal((4, 3, 3, 3)))
        b = Tensor(rng.standard_normal(4))
        ada = adaptive_dilated_conv(x, w, b, (d,), Tensor(rng.standard_normal((1, 3, 1, 1))), None, 0.7,
                                    gumbel_noise(rng, (2, 1, 10, 10)))
        bitwise &= np.array_equal(ada.data, T.conv2d(x, w, b, 1, d, d).data)
    logits = Tensor(rng.standard_normal((3, 4, 12, 12)) * 4)
    probs = gumbel_softmax(logits, 0.5, gumbel_noise(rng, logits.shape))
    fields = [DilationField.from_tensor(probs, i) for i in range(probs.shape[0])]
    row_err = max(float(np.abs(f.probs.sum(axis=-1) - 1.0).max()) for f in fields)
    hot = gumbel_softmax(Tensor(np.clip(logits.data, -10, 10)), 1e6, gumbel_noise(rng, logits.shape))
    uniform_dev = float(np.abs(hot.data - 0.25).max())
    verdict(5, "CaMFuse degeneracy", bitwise and row_err <= 1e-9 and uniform_dev < 1e-4,
            f"bitwise {bitwise}, row-sum error {row_err:.1e}, uniform deviation {uniform_dev:.1e}")


def test_c6_metric_hand_cases(verdict):
    gt = np.zeros((4, 4), bool)
    gt[1:3, 1:3] = True
    pred = np.zeros((4, 4), bool)
    pred[1, 1:3] = True
    _, dice, _, iou = occupancy_metrics(pred, gt)
    d, nd, e = distance_metrics_xy([(1.0, 1.0)], [(1.0, 2.0)], (0.0, 0.0))
    hand = (abs(dice - 0.6667) <= 1e-4 and abs(iou - 0.5) <= 1e-4 and abs(e - 1.0) <= 1e-4
            and abs(d - 1.0) <= 1e-4 and abs(nd - 0.70711) <= 1e-4)
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        shape = tuple(rng.integers(1, 12, size=2))
        a, b = rng.random(shape) < rng.random(), rng.random(shape) < rng.random()
        _, dc, _, io = occupancy_metrics(a, b)
        worst = max(worst, abs(dc - 2 * io / (1 + io)))
    verdict(6, "metric hand cases", hand and worst <= 1e-12,
            f"dice {dice:.4f} iou {iou:.4f} E {e:.4f} D {d:.4f} ND {nd:.5f}; identity error {worst:.1e}")


# Toy learning problem: cylinders only, two to four per scene, reversing at 0.2-1 m/s.
TOY_SIM = {
    "duration_ms": 1200.0, "obstacles_per_scene": (2, 4), "speed_mps": (0.2, 1.0), "yaw_rate": (-0.3, 0.3),
    "cylinder_radius_m": (0.25, 0.5), "shape_probs": (0.0, 0.0, 1.0),
}
TOY_TRAIN = {"epochs": 30, "frames_per_scene": 8, "batch_size": 4, "lr": 3e-3, "hflip": True}


def test_c7_toy_learning(verdict, tmp_path):
    start = time.perf_counter()
    desk = build_config()
    sim = dataclasses.replace(desk.sim, n_scenes=14, split_counts=(12, 2, 0), **TOY_SIM)
    generate_dataset(sim, 0, tmp_path)
    train_set = load_samples(tmp_path, "train", TOY_TRAIN["frames_per_scene"])
    val_set = load_samples(tmp_path, "val")
    scene = load_scene(list_split(tmp_path, "train")[0])
    gt = np.stack([s.gt for s in val_set])
    labels = [f"{s.scene_id}:{s.frame}" for s in val_set]
    scores = {}
    for mode in ("multimodal", "visible", "uls"):
        net = build_network(desk.network, scene, mode, 0)
        train(net, train_set, TrainConfig(**TOY_TRAIN))
        agg = evaluate(predict(net, val_set), gt, scene.grid, labels)[-1]
        scores[mode] = (agg.iou, agg.euclidean_E)
    elapsed = time.perf_counter() - start
    (mm_iou, mm_e), (vis_iou, vis_e), (uls_iou, uls_e) = scores["multimodal"], scores["visible"], scores["uls"]
    ok = (mm_iou >= 0.5 and mm_iou - vis_iou > 0.05 and mm_iou - uls_iou > 0.05 and mm_e < vis_e and mm_e < uls_e
          and elapsed < 1800.0)
    detail = ", ".join(f"{m} iou {i:.3f} E {e:.3f}" for m, (i, e) in scores.items()) + f"; {elapsed:.0f} s"
    verdict(7, "toy learning", ok, detail)


def test_c8_simulator_statistics(verdict, tmp_path):
    rng = np.random.default_rng(8)
    gaps = np.array([draw_gap(rng) for _ in range(20000)])
    hist, edges = np.histogram(gaps, bins=np.arange(30.0, 90.0, 2.0))
    modes = [float(edges[i] + 1.0) for i in range(1, len(hist) - 1) if hist[i] >= hist[i - 1] and hist[i] > hist[i + 1]]
    gap_ok = (len(modes) == 2 and abs(modes[0] - 40) <= 2 and abs(modes[1] - 80) <= 2
              and gaps.min() >= 34.0 and gaps.max() <= 85.0)
    cfg = SimConfig(n_scenes=200)
    ranges = []
    for i in range(cfg.n_scenes):
        scene, cam_ts, uls_ts = sample_scene(cfg, 8, i)
        ranges += [closest_range(scene, ob, max(cam_ts[-1], uls_ts[-1])) for ob in scene.obstacles]
    range_hist, _ = np.histogram(ranges, bins=[0.0, 2.0, 4.0, 6.0])
    manifest = generate_dataset(SimConfig(n_scenes=8, duration_ms=100.0), 8, tmp_path)
    ids = [s for split in manifest["splits"].values() for s in split]
    on_disk = sorted(p.name for split in ("train", "val", "test") for p in (tmp_path / split).iterdir())
    partition = len(ids) == len(set(ids)) == 8 and sorted(ids) == on_disk
    verdict(8, "simulator statistics", gap_ok and int(np.argmax(range_hist)) == 0 and partition,
            f"gap modes {modes}, gap range [{gaps.min():.1f}, {gaps.max():.1f}] ms, "
            f"range histogram {range_hist.tolist()}, partition {partition}")


def _tree(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_determinism(verdict, tmp_path, monkeypatch):
    raw = {
        "sim": {"n_scenes": 4, "split_counts": [3, 1, 0], "duration_ms": 200},
        "trainer": {"epochs": 2, "frames_per_scene": 2, "batch_size": 2},
    }
    trees = []
    for threads in ("1", "4", "1", "4"):
        monkeypatch.setenv("BEVFUSE_THREADS", threads)
        run_dir = tmp_path / f"run{len(trees)}"
        path = run_dir / "c.json"
        run_dir.mkdir()
        path.write_text(json.dumps(dict(raw, dataset_root=str(run_dir / "data"), output_root=str(run_dir / "out"))))
        cfg = load_config(path)
        cmd_simulate(cfg, 9)
        cmd_train(cfg, "multimodal")
        tree = _tree(run_dir / "data")
        out = _tree(run_dir / "out")
        # The run record names its own directories; everything else must match byte for byte.
        out.pop("multimodal/run.json")
        trees.append((tree, out))
    same = all(t == trees[0] for t in trees[1:])
    verdict(9, "determinism", same, f"{len(trees)} runs across BEVFUSE_THREADS 1 and 4, "
            f"{len(trees[0][0]) + len(trees[0][1])} files {'identical' if same else 'differ'}")
