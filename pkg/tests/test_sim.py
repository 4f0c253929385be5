from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest

from bevfuse.errors import SimulationError
from bevfuse.fisheye import crop_bounds, default_bands
from bevfuse.geometry import GridSpec, Pose2D, world_to_cell
from bevfuse.io import read_json, read_pgm
from bevfuse.sim import (
    GAP_RANGE_MS,
    Obstacle,
    SimConfig,
    background,
    camera_timestamps,
    closest_range,
    draw_gap,
    generate_dataset,
    obstacle_pixels,
    rasterize_gt,
    render_fisheye,
    sample_scene,
    static_scene,
    synth_echoes,
)
from bevfuse.ultrasonic import fill_grid

SPEC = GridSpec()


def point(x, y, refl=1.0):
    return Obstacle("point", Pose2D(x, y, 0.0), 0.5, refl)


def cylinder(x, y, r=0.2, h=0.8):
    return Obstacle("cylinder", Pose2D(x, y, 0.0), h, 0.8, radius=r)


def test_obstacle_validation():
    with pytest.raises(SimulationError):
        Obstacle("cone", Pose2D(), 1.0, 0.5)
    with pytest.raises(SimulationError):
        Obstacle("point", Pose2D(), 1.0, 0.0)
    with pytest.raises(SimulationError):
        Obstacle("box", Pose2D(), 1.0, 0.5, width=0.3)


def test_empty_scene_is_silent_and_blank():
    scene = static_scene([])
    frame = synth_echoes(scene, 0.0)
    assert all(not env.amplitudes.any() for env in frame.envelopes)
    assert np.array_equal(render_fisheye(scene, 0.0), np.round(background(scene.intrinsics)).astype(np.uint8))
    grid, inst = rasterize_gt(scene, 0.0, SPEC)
    assert not grid.data.any() and inst == []


def test_point_on_sensor_axis_peaks_at_round_trip():
    scene = static_scene([])
    s = scene.layout.sensor(2).pose
    ob = point(s.x + math.cos(s.yaw), s.y + math.sin(s.yaw))
    env = next(e for e in synth_echoes(static_scene([ob]), 0.0).envelopes if e.emitter_id == 2 and e.receiver_id == 2)
    assert int(np.argmax(env.amplitudes)) * env.sample_spacing == pytest.approx(2.0, abs=1e-9)
    assert env.amplitudes.max() == pytest.approx(0.25, rel=1e-9)


def test_obstacle_beyond_radial_fov_is_silent():
    frame = synth_echoes(static_scene([point(-4.9, 0.0), cylinder(-5.2, 1.0)]), 0.0)
    assert all(not env.amplitudes.any() for env in frame.envelopes)


def test_noise_floor_bounded():
    scene = static_scene([], noise_level=0.01)
    for env in synth_echoes(scene, 40.0).envelopes:
        assert env.amplitudes.min() >= 0 and env.amplitudes.max() <= 0.01


def test_box_area():
    box = Obstacle("box", Pose2D(-2.0, 0.0, 0.0), 0.5, 0.5, width=0.5, length=0.5)
    grid, inst = rasterize_gt(static_scene([box]), 0.0, SPEC)
    assert grid.data.sum() == 100
    assert len(inst) == 1


@pytest.mark.parametrize("r", [0.12, 0.25, 0.4])
def test_cylinder_area(r):
    grid, _ = rasterize_gt(static_scene([cylinder(-2.013, 0.371, r)]), 0.0, SPEC)
    c = SPEC.cell_size
    assert abs(grid.data.sum() - math.pi * r * r / c**2) <= 2 * math.pi * r / c


def test_point_marks_single_cell():
    grid, _ = rasterize_gt(static_scene([point(-1.02, 0.33)]), 0.0, SPEC)
    assert grid.data.sum() == 1
    assert grid.data[world_to_cell(SPEC, (-1.02, 0.33))] == 1


def test_centred_cylinder_silhouette_is_centred():
    scene = static_scene([cylinder(-2.0, 0.0, 0.3)])
    mask = obstacle_pixels(scene.obstacles[0], Pose2D(), scene.intrinsics, scene.extrinsics)
    cols = np.nonzero(mask.any(axis=0))[0]
    assert (cols.min() + cols.max()) / 2 == pytest.approx(scene.intrinsics.cx, abs=1.0)


def test_painter_order_nearest_last():
    near, far = cylinder(-1.0, 0.0, 0.2, 1.0), cylinder(-2.5, 0.0, 0.6, 1.2)
    near = Obstacle("cylinder", near.pose, near.height, 1.0, radius=0.2)
    far = Obstacle("cylinder", far.pose, far.height, 0.4, radius=0.6)
    scene = static_scene([near, far])
    img = render_fisheye(scene, 0.0)
    near_px = obstacle_pixels(near, Pose2D(), scene.intrinsics, scene.extrinsics)
    assert np.all(img[near_px] == 250)


def _silhouette_rows(ob, scene):
    rows = np.nonzero(obstacle_pixels(ob, Pose2D(), scene.intrinsics, scene.extrinsics).any(axis=1))[0]
    return rows.min(), rows.max()


@pytest.mark.parametrize("depth, band_index", [(4.5, 0), (2.4, 1), (1.2, 2), (0.6, 3)])
def test_silhouette_bottom_row_inside_band_crop(depth, band_index):
    scene = static_scene([])
    band = default_bands()[band_index]
    ob = cylinder(-depth - 0.05, 0.0, 0.05, 1.0)
    v_min, v_max = crop_bounds(scene.intrinsics, scene.extrinsics, band)
    # The footprint edge nearest the camera sits at the lowest image row of the silhouette.
    _, bottom = _silhouette_rows(ob, scene)
    assert v_min <= bottom < v_max


def test_silhouettes_within_union_of_band_crops():
    cfg = SimConfig(n_scenes=6)
    scene0 = sample_scene(cfg, 3, 0)[0]
    crops = [crop_bounds(scene0.intrinsics, scene0.extrinsics, b) for b in default_bands()]
    allowed = np.zeros(scene0.intrinsics.height, dtype=bool)
    for lo, hi in crops:
        allowed[lo:hi] = True
    for i in range(cfg.n_scenes):
        scene, cam_ts, _ = sample_scene(cfg, 3, i)
        to_vehicle = scene.ego_pose(cam_ts[-1]).inverse()
        for ob in scene.obstacles:
            rows = np.nonzero(obstacle_pixels(ob, to_vehicle, scene.intrinsics, scene.extrinsics).any(axis=1))[0]
            assert allowed[rows].all()


def test_point_echo_localises_within_two_cells():
    # Lattice offset from cell edges so the true cell is unambiguous.
    for x in np.arange(-0.5, -3.01, -0.25) + 0.013:
        for y in np.arange(-1.0, 1.01, 0.25) + 0.017:
            scene = static_scene([point(x, y)])
            grid = fill_grid(synth_echoes(scene, 0.0), scene.layout, SPEC)
            peak = np.unravel_index(np.argmax(grid.data[..., 0]), SPEC.shape)
            truth = world_to_cell(SPEC, (x, y))
            assert max(abs(peak[0] - truth[0]), abs(peak[1] - truth[1])) <= 2, (x, y)


def test_gap_model_statistics():
    rng = np.random.default_rng(0)
    gaps = np.array([draw_gap(rng) for _ in range(20000)])
    assert gaps.min() >= GAP_RANGE_MS[0] and gaps.max() <= GAP_RANGE_MS[1]
    hist, edges = np.histogram(gaps, bins=np.arange(30.0, 90.0, 2.0))
    peaks = [edges[i] + 1.0 for i in range(1, len(hist) - 1) if hist[i] >= hist[i - 1] and hist[i] > hist[i + 1]]
    assert len(peaks) == 2
    assert abs(peaks[0] - 40.0) <= 2.0 and abs(peaks[1] - 80.0) <= 2.0
    assert np.mean(gaps < 60) == pytest.approx(0.6, abs=0.02)


def test_camera_cadence():
    ts = camera_timestamps(400.0)
    assert ts[0] == 0.0 and len(ts) == 13
    assert np.allclose(np.diff(ts), 1000 / 30, atol=1.0)


def test_range_prior_mode_near():
    cfg = SimConfig(n_scenes=200)
    ranges = []
    for i in range(cfg.n_scenes):
        scene, cam_ts, uls_ts = sample_scene(cfg, 11, i)
        ranges += [closest_range(scene, ob, max(cam_ts[-1], uls_ts[-1])) for ob in scene.obstacles]
    hist, _ = np.histogram(ranges, bins=[0.0, 2.0, 4.0, 6.0])
    assert int(np.argmax(hist)) == 0
    assert min(ranges) >= 0.1 and max(ranges) <= 6.0


def test_config_validation():
    with pytest.raises(SimulationError):
        SimConfig(n_scenes=4, split_counts=(2, 1, 0))
    with pytest.raises(SimulationError):
        SimConfig(shape_probs=(0.5, 0.5, 0.5))
    assert SimConfig(n_scenes=35).counts() == (26, 4, 5)


def _tree(root: Path):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_dataset_layout_partition_and_determinism(tmp_path):
    cfg = SimConfig(n_scenes=4, duration_ms=150.0)
    a = generate_dataset(cfg, 5, tmp_path / "a", threads=1)
    generate_dataset(cfg, 5, tmp_path / "b", threads=3)
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")
    ids = [s for split in a["splits"].values() for s in split]
    assert sorted(ids) == [f"s{i:04d}" for i in range(4)]
    assert len(set(ids)) == len(ids)
    scene_dir = tmp_path / "a" / "train" / "s0000"
    for name in ("calib.json", "layout.json", "odometry.csv", "uls.jsonl", "index.json"):
        assert (scene_dir / name).is_file()
    index = read_json(scene_dir / "index.json")
    frame = index["frames"][0]
    assert read_pgm(scene_dir / frame["image"]).shape == (64, 64)
    assert set(np.unique(read_pgm(scene_dir / frame["gt"]))) <= {0, 255}
    assert all(f["uls_ts"] <= f["camera_ts"] for f in index["frames"])


def test_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(SimulationError):
        generate_dataset(SimConfig(n_scenes=1, duration_ms=50.0), 0, blocker)
