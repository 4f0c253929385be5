"""Synthetic reversing scenes: obstacles, echo envelopes, fisheye silhouettes,
BEV ground truth and whole datasets on disk."""

from __future__ import annotations

import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import BevFuseError, SimulationError
from .fisheye import CameraExtrinsics, FisheyeIntrinsics, project
from .geometry import BevGrid, GridSpec, Pose2D, world_to_cell
from .io import (calib_to_dict, write_json, write_odometry_csv, write_pgm, write_uls_jsonl)
from .metrics import ObstacleInstance, extract_obstacles
from .runtime import parallel_map
from .sync import OdometrySample, interpolate_pose, match_frames
from .ultrasonic import (DEFAULT_SPACING_M, RADIAL_FOV_M, EchoEnvelope, SensorLayout, UltrasonicFrame,
                         attenuation_weight, default_rear_layout, effective_half_angle)

SHAPES = ("point", "box", "cylinder")
CAMERA_PERIOD_MS = 1000.0 / 30.0
ODOMETRY_PERIOD_MS = 40.0
GAP_MODES_MS = (40.0, 80.0)
GAP_PROBS = (0.6, 0.4)
GAP_JITTER_MS = 3.0
GAP_RANGE_MS = (34.0, 85.0)
ENVELOPE_SAMPLES = 450  # 0..8.98 m round trip at 2 cm spacing
SPLITS = ("train", "val", "test")


def default_intrinsics() -> FisheyeIntrinsics:
    return FisheyeIntrinsics(18.0, 18.0, 31.5, 31.5, (0.01, -0.005, 0.001, -0.0001), 64, 64)


def default_extrinsics() -> CameraExtrinsics:
    """Rear camera on the bumper centre, 1 m up, looking back and 25 degrees down."""
    return CameraExtrinsics(0.0, 0.0, 1.0, pitch=math.radians(25.0), yaw=math.pi)


@dataclass(frozen=True)
class Obstacle:
    shape: str
    pose: Pose2D  # world frame
    height: float
    reflectivity: float
    width: float = 0.0  # box extent along local y
    length: float = 0.0  # box extent along local x
    radius: float = 0.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise SimulationError(f"unknown obstacle shape {self.shape!r}")
        if not (0.0 < self.reflectivity <= 1.0):
            raise SimulationError("reflectivity must lie in (0, 1]")
        if self.height <= 0:
            raise SimulationError("obstacle height must be positive")
        if self.shape == "box" and not (self.width > 0 and self.length > 0):
            raise SimulationError("box obstacles need positive width and length")
        if self.shape == "cylinder" and not self.radius > 0:
            raise SimulationError("cylinder obstacles need a positive radius")

    @property
    def extent(self) -> float:
        """Radius of the smallest centred disc covering the footprint."""
        if self.shape == "box":
            return 0.5 * math.hypot(self.width, self.length)
        return self.radius

    def boundary(self, spacing: float = 0.02) -> np.ndarray:
        """World-frame footprint boundary samples, (n, 2)."""
        if self.shape == "point":
            local = np.zeros((1, 2))
        elif self.shape == "cylinder":
            n = max(8, int(math.ceil(2 * math.pi * self.radius / spacing)))
            a = 2 * math.pi * np.arange(n) / n
            local = self.radius * np.stack([np.cos(a), np.sin(a)], axis=-1)
        else:
            hl, hw = self.length / 2, self.width / 2
            corners = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
            pts = []
            for a, b in zip(corners, np.roll(corners, -1, axis=0)):
                n = max(1, int(math.ceil(np.hypot(*(b - a)) / spacing)))
                t = np.arange(n)[:, None] / n
                pts.append(a + t * (b - a))
            local = np.concatenate(pts)
        return self.pose.apply(local)

    def contains(self, pts_world: np.ndarray) -> np.ndarray:
        """Half-open centre-in-shape test for (..., 2) world points."""
        local = self.pose.inverse().apply(pts_world)
        u, v = local[..., 0], local[..., 1]
        if self.shape == "box":
            return (u >= -self.length / 2) & (u < self.length / 2) & (v >= -self.width / 2) & (v < self.width / 2)
        if self.shape == "cylinder":
            return u * u + v * v < self.radius * self.radius
        return np.zeros(u.shape, dtype=bool)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pose"] = list(self.pose.as_tuple())
        return d


@dataclass
class Scene:
    obstacles: List[Obstacle]
    ego_track: List[OdometrySample]
    layout: SensorLayout = field(default_factory=default_rear_layout)
    intrinsics: FisheyeIntrinsics = field(default_factory=default_intrinsics)
    extrinsics: CameraExtrinsics = field(default_factory=default_extrinsics)
    seed: int = 0
    noise_level: float = 0.0
    image_noise: float = 0.0

    def ego_pose(self, t: float) -> Pose2D:
        if not self.ego_track:
            return Pose2D()
        return interpolate_pose(self.ego_track, t)

    def noise_rng(self, t: float, stream: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream, int(round(t * 1000))])


def static_scene(obstacles: Sequence[Obstacle], **kw) -> Scene:
    """Scene with the ego parked at the world origin for one second."""
    track = [OdometrySample(float(t), Pose2D()) for t in np.arange(0.0, 1000.0 + ODOMETRY_PERIOD_MS, ODOMETRY_PERIOD_MS)]
    return Scene(list(obstacles), track, **kw)


# -- echoes ---------------------------------------------------------------------


def synth_echoes(scene: Scene, t: float, sample_spacing: float = DEFAULT_SPACING_M,
                 n_samples: int = ENVELOPE_SAMPLES) -> UltrasonicFrame:
    """Per-signalway envelopes from time of flight to the nearest boundary samples."""
    layout = scene.layout
    to_vehicle = scene.ego_pose(t).inverse()
    reflectors = [(ob, to_vehicle.apply(ob.boundary())) for ob in scene.obstacles]
    sigma = 2.0 * sample_spacing
    dist_axis = np.arange(n_samples) * sample_spacing
    rng = scene.noise_rng(t, 1)
    envs = []
    ways = layout.signalways or tuple((s.id, s.id) for s in layout.sensors)
    for tx, rx in ways:
        s1, s2 = layout.sensor(tx).pose, layout.sensor(rx).pose
        amps = np.zeros(n_samples)
        for ob, pts in reflectors:
            picks = {int(np.argmin(np.hypot(*(pts - [s.x, s.y]).T))) for s in (s1, s2)}
            for i in sorted(picks):
                p = pts[i]
                d1 = math.hypot(p[0] - s1.x, p[1] - s1.y)
                d2 = math.hypot(p[0] - s2.x, p[1] - s2.y)
                if d1 > RADIAL_FOV_M or d2 > RADIAL_FOV_M or d1 + d2 <= 0:
                    continue
                a1 = math.remainder(math.atan2(p[1] - s1.y, p[0] - s1.x) - s1.yaw, 2 * math.pi)
                a2 = math.remainder(math.atan2(p[1] - s2.y, p[0] - s2.x) - s2.yaw, 2 * math.pi)
                w = attenuation_weight(a1, effective_half_angle(layout, d1)) * attenuation_weight(
                    a2, effective_half_angle(layout, d2))
                if w <= 0:
                    continue
                amp = ob.reflectivity * w * (1.0 / (d1 + d2)) ** 2
                amps += amp * np.exp(-0.5 * ((dist_axis - (d1 + d2)) / sigma) ** 2)
        if scene.noise_level > 0:
            amps += rng.uniform(0.0, scene.noise_level, n_samples)
        envs.append(EchoEnvelope(tx, rx, np.clip(amps, 0.0, None), sample_spacing))
    return UltrasonicFrame(float(t), tuple(envs))


# -- camera -----------------------------------------------------------------------

BACKGROUND_TOP, BACKGROUND_BOTTOM = 40.0, 120.0


def background(intr: FisheyeIntrinsics) -> np.ndarray:
    ramp = np.linspace(BACKGROUND_TOP, BACKGROUND_BOTTOM, intr.height)
    return np.repeat(ramp[:, None], intr.width, axis=1)


def obstacle_pixels(ob: Obstacle, to_vehicle: Pose2D, intr: FisheyeIntrinsics, extr: CameraExtrinsics) -> np.ndarray:
    """Boolean (H, W) silhouette of one obstacle."""
    foot = to_vehicle.apply(ob.boundary(0.03))
    levels = np.linspace(0.0, ob.height, 7)
    pts = np.concatenate([np.column_stack([foot, np.full(len(foot), z)]) for z in levels])
    pc = extr.vehicle_to_camera(pts)
    theta = np.arctan2(np.hypot(pc[:, 0], pc[:, 1]), pc[:, 2])
    keep = (theta <= intr.theta_max) & (np.linalg.norm(pc, axis=1) > 1e-9)
    mask = np.zeros((intr.height, intr.width), dtype=bool)
    if not keep.any():
        return mask
    uv = project(pc[keep], intr)
    ui = np.round(uv[:, 0]).astype(int)
    vi = np.round(uv[:, 1]).astype(int)
    on = (ui >= 0) & (ui < intr.width) & (vi >= 0) & (vi < intr.height)
    mask[vi[on], ui[on]] = True
    try:
        hull = ConvexHull(uv)
    except (QhullError, ValueError):
        return mask
    u0, v0 = np.floor(uv.min(axis=0)).astype(int)
    u1, v1 = np.ceil(uv.max(axis=0)).astype(int)
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, intr.width - 1), min(v1, intr.height - 1)
    if u0 > u1 or v0 > v1:
        return mask
    gu, gv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    grid_pts = np.stack([gu.ravel(), gv.ravel()], axis=-1).astype(np.float64)
    inside = np.all(grid_pts @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9, axis=1)
    mask[gv.ravel()[inside], gu.ravel()[inside]] = True
    return mask


def obstacle_shade(ob: Obstacle) -> float:
    return 170.0 + 80.0 * ob.reflectivity


def render_fisheye(scene: Scene, t: float) -> np.ndarray:
    """uint8 silhouette image; nearer obstacles overwrite farther ones."""
    intr, extr = scene.intrinsics, scene.extrinsics
    img = background(intr)
    to_vehicle = scene.ego_pose(t).inverse()
    cam_xy = np.array([extr.x, extr.y])
    order = sorted(
        scene.obstacles,
        key=lambda ob: -float(np.min(np.hypot(*(to_vehicle.apply(ob.boundary()) - cam_xy).T))),
    )
    for ob in order:
        img[obstacle_pixels(ob, to_vehicle, intr, extr)] = obstacle_shade(ob)
    if scene.image_noise > 0:
        img = img + scene.noise_rng(t, 2).normal(0.0, scene.image_noise, img.shape)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


# -- ground truth -----------------------------------------------------------------


def rasterize_gt(scene: Scene, t: float, spec: GridSpec) -> Tuple[BevGrid, List[ObstacleInstance]]:
    """Obstacle footprints on ``spec`` at time ``t``, plus their 4-connected instances."""
    ego = scene.ego_pose(t)
    world_centers = ego.apply(spec.cell_centers())
    mask = np.zeros(spec.shape, dtype=bool)
    to_vehicle = ego.inverse()
    for ob in scene.obstacles:
        if ob.shape == "point":
            idx = world_to_cell(spec, to_vehicle.apply(np.array([ob.pose.x, ob.pose.y])))
            if idx is not None:
                mask[idx] = True
        else:
            mask |= ob.contains(world_centers)
    grid = BevGrid(spec, mask.astype(np.float64))
    return grid, extract_obstacles(grid)


# -- scene sampling ---------------------------------------------------------------


@dataclass
class SimConfig:
    n_scenes: int = 16
    split_counts: Optional[Tuple[int, int, int]] = None
    split_fractions: Tuple[float, float, float] = (0.75, 0.125, 0.125)
    duration_ms: float = 400.0
    obstacles_per_scene: Tuple[int, int] = (1, 3)
    shape_probs: Tuple[float, float, float] = (0.1, 0.5, 0.4)
    box_size_m: Tuple[float, float] = (0.3, 1.0)
    cylinder_radius_m: Tuple[float, float] = (0.1, 0.35)
    height_m: Tuple[float, float] = (0.3, 1.2)
    reflectivity: Tuple[float, float] = (0.4, 1.0)
    range_shape: float = 2.0
    range_scale_m: float = 0.6
    range_min_m: float = 0.4
    range_max_m: float = 5.5
    azimuth_half_span: float = math.radians(50.0)
    min_gap_m: float = 0.2  # free space between neighbouring footprints
    speed_mps: Tuple[float, float] = (0.0, 0.8)
    yaw_rate: Tuple[float, float] = (-0.15, 0.15)
    noise_level: float = 0.005
    image_noise: float = 3.0
    grid: GridSpec = field(default_factory=GridSpec)
    intrinsics: FisheyeIntrinsics = field(default_factory=default_intrinsics)
    extrinsics: CameraExtrinsics = field(default_factory=default_extrinsics)
    layout: SensorLayout = field(default_factory=default_rear_layout)

    def __post_init__(self):
        if self.n_scenes < 1:
            raise SimulationError("need at least one scene")
        if self.split_counts is not None:
            self.split_counts = tuple(int(c) for c in self.split_counts)
            if len(self.split_counts) != 3 or min(self.split_counts) < 0 or sum(self.split_counts) != self.n_scenes:
                raise SimulationError("split_counts must be three non-negative counts summing to n_scenes")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or min(self.split_fractions) < 0:
            raise SimulationError("split_fractions must be non-negative and sum to 1")
        if self.duration_ms <= 0:
            raise SimulationError("duration_ms must be positive")
        lo, hi = self.obstacles_per_scene
        if not (0 <= lo <= hi):
            raise SimulationError("obstacles_per_scene must be an ordered (min, max) pair")
        if abs(sum(self.shape_probs) - 1.0) > 1e-9:
            raise SimulationError("shape_probs must sum to 1")
        if self.min_gap_m < 0:
            raise SimulationError("min_gap_m must be non-negative")
        if not (0.1 <= self.range_min_m < self.range_max_m <= 6.0):
            raise SimulationError("obstacle ranges must lie within 0.1-6 m")

    def counts(self) -> Tuple[int, int, int]:
        if self.split_counts is not None:
            return self.split_counts
        n_train = int(round(self.split_fractions[0] * self.n_scenes))
        n_val = int(round(self.split_fractions[1] * self.n_scenes))
        n_val = min(n_val, self.n_scenes - n_train)
        return n_train, n_val, self.n_scenes - n_train - n_val

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("grid", "intrinsics", "extrinsics", "layout")}
        d["grid"] = self.grid.to_dict()
        d["calib"] = calib_to_dict(self.intrinsics, self.extrinsics)
        d["layout"] = self.layout.to_dict()
        return d


def ego_pose_at(speed: float, yaw_rate: float, t_ms: float) -> Pose2D:
    """Constant-speed reverse arc starting at the world origin."""
    t = t_ms / 1000.0
    if abs(yaw_rate) < 1e-12:
        return Pose2D(-speed * t, 0.0, 0.0)
    r = speed / yaw_rate
    a = yaw_rate * t
    return Pose2D(-r * math.sin(a), -r * (1.0 - math.cos(a)), -a)


def draw_gap(rng: np.random.Generator) -> float:
    mode = GAP_MODES_MS[0] if rng.random() < GAP_PROBS[0] else GAP_MODES_MS[1]
    gap = mode + rng.triangular(-GAP_JITTER_MS, 0.0, GAP_JITTER_MS)
    return float(np.clip(gap, *GAP_RANGE_MS))


def camera_timestamps(duration_ms: float) -> List[float]:
    n = int(math.floor(duration_ms / CAMERA_PERIOD_MS)) + 1
    return [float(round(k * CAMERA_PERIOD_MS)) for k in range(n) if round(k * CAMERA_PERIOD_MS) <= duration_ms]


def uls_timestamps(rng: np.random.Generator, duration_ms: float) -> List[float]:
    ts = [0.0]
    while True:
        nxt = round(ts[-1] + draw_gap(rng), 3)
        if nxt > duration_ms:
            return ts
        ts.append(nxt)


def _draw_obstacle(rng: np.random.Generator, cfg: SimConfig, closest: Pose2D, travel: float) -> Obstacle:
    """Obstacle placed by its range from the ego pose of closest approach."""
    shape = SHAPES[int(rng.choice(3, p=cfg.shape_probs))]
    kw: Dict[str, float] = {}
    if shape == "box":
        kw = {"width": float(rng.uniform(*cfg.box_size_m)), "length": float(rng.uniform(*cfg.box_size_m))}
    elif shape == "cylinder":
        kw = {"radius": float(rng.uniform(*cfg.cylinder_radius_m))}
    extent = 0.5 * math.hypot(kw.get("width", 0.0), kw.get("length", 0.0)) or kw.get("radius", 0.0)
    lo = cfg.range_min_m + extent
    hi = max(lo, cfg.range_max_m - travel - extent)
    r = cfg.range_min_m + rng.gamma(cfg.range_shape, cfg.range_scale_m)
    r = float(np.clip(r + extent, lo, hi))
    az = math.pi + float(rng.uniform(-cfg.azimuth_half_span, cfg.azimuth_half_span))
    center = closest.apply(np.array([r * math.cos(az), r * math.sin(az)]))
    pose = Pose2D(float(center[0]), float(center[1]), float(rng.uniform(-math.pi, math.pi)))
    return Obstacle(shape, pose, float(rng.uniform(*cfg.height_m)), float(rng.uniform(*cfg.reflectivity)), **kw)


def sample_scene(cfg: SimConfig, seed: int, index: int) -> Tuple[Scene, List[float], List[float]]:
    """One scene and its camera / ultrasonic timestamps, from RNG stream (seed, index)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    speed = float(rng.uniform(*cfg.speed_mps))
    yaw_rate = float(rng.uniform(*cfg.yaw_rate))
    cam_ts = camera_timestamps(cfg.duration_ms)
    uls_ts = uls_timestamps(rng, cfg.duration_ms)
    end = max(cam_ts[-1], uls_ts[-1])
    odo_ts = np.arange(0.0, end + 2 * ODOMETRY_PERIOD_MS, ODOMETRY_PERIOD_MS)
    track = [OdometrySample(float(t), ego_pose_at(speed, yaw_rate, float(t))) for t in odo_ts]
    travel = speed * end / 1000.0
    closest = ego_pose_at(speed, yaw_rate, end)
    n_obs = int(rng.integers(cfg.obstacles_per_scene[0], cfg.obstacles_per_scene[1] + 1))
    obstacles: List[Obstacle] = []
    for _ in range(50 * max(n_obs, 1)):
        if len(obstacles) >= n_obs:
            break
        ob = _draw_obstacle(rng, cfg, closest, travel)
        clear = all(math.hypot(ob.pose.x - o.pose.x, ob.pose.y - o.pose.y) > ob.extent + o.extent + cfg.min_gap_m for o in obstacles)
        if clear:
            obstacles.append(ob)
    scene = Scene(obstacles, track, cfg.layout, cfg.intrinsics, cfg.extrinsics,
                  seed=int(np.random.SeedSequence([seed, index]).generate_state(1)[0]),
                  noise_level=cfg.noise_level, image_noise=cfg.image_noise)
    return scene, cam_ts, uls_ts


def closest_range(scene: Scene, ob: Obstacle, t_end: float) -> float:
    """Footprint distance from the camera at the ego pose of closest approach."""
    local = scene.ego_pose(t_end).inverse().apply(ob.boundary())
    return float(np.min(np.hypot(local[:, 0] - scene.extrinsics.x, local[:, 1] - scene.extrinsics.y)))


# -- dataset writer ---------------------------------------------------------------


def scene_id(index: int) -> str:
    return f"s{index:04d}"


def split_of(cfg: SimConfig) -> List[str]:
    n_train, n_val, n_test = cfg.counts()
    return ["train"] * n_train + ["val"] * n_val + ["test"] * n_test


def write_scene(root: Path, cfg: SimConfig, seed: int, index: int, split: str) -> dict:
    scene, cam_ts, uls_ts = sample_scene(cfg, seed, index)
    sid = scene_id(index)
    d = root / split / sid
    (d / "images").mkdir(parents=True)
    (d / "gt").mkdir()
    write_json(d / "calib.json", calib_to_dict(scene.intrinsics, scene.extrinsics))
    write_json(d / "layout.json", scene.layout.to_dict())
    write_odometry_csv(d / "odometry.csv", scene.ego_track)
    frames = [synth_echoes(scene, t) for t in uls_ts]
    write_uls_jsonl(d / "uls.jsonl", frames)
    pairs = match_frames(cam_ts, uls_ts, scene.ego_track)
    records = []
    for p in pairs:
        k = p.camera_index
        write_pgm(d / "images" / f"{k:06d}.pgm", render_fisheye(scene, p.camera_ts))
        gt, inst = rasterize_gt(scene, p.camera_ts, cfg.grid)
        write_pgm(d / "gt" / f"{k:06d}.pgm", (gt.labels() * 255).astype(np.uint8))
        records.append({
            "index": k,
            "camera_ts": p.camera_ts,
            "uls_ts": p.uls_ts,
            "uls_index": p.uls_index,
            "pose_delta": list(p.pose_delta.as_tuple()),
            "image": f"images/{k:06d}.pgm",
            "gt": f"gt/{k:06d}.pgm",
            "instances": [{"centroid": inst_i.centroid.tolist(), "cells": len(inst_i.cells)} for inst_i in inst],
        })
    ranges = [closest_range(scene, ob, max(cam_ts[-1], uls_ts[-1])) for ob in scene.obstacles]
    index_doc = {
        "scene_id": sid,
        "split": split,
        "seed": scene.seed,
        "grid": cfg.grid.to_dict(),
        "camera_timestamps": cam_ts,
        "uls_timestamps": uls_ts,
        "frames": records,
        "obstacles": [dict(ob.to_dict(), range_m=r) for ob, r in zip(scene.obstacles, ranges)],
    }
    write_json(d / "index.json", index_doc)
    return {"scene_id": sid, "split": split, "frames": len(records), "uls_frames": len(uls_ts)}


def generate_dataset(cfg: SimConfig, seed: int, root, threads: Optional[int] = None, overwrite: bool = True) -> dict:
    """Write every scene under ``root/<split>/<scene_id>`` plus ``root/dataset.json``."""
    root = Path(root)
    try:
        if root.exists() and overwrite:
            for split in SPLITS:
                if (root / split).exists():
                    shutil.rmtree(root / split)
        for split in SPLITS:
            (root / split).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SimulationError(f"cannot write dataset to {root}: {exc}") from exc
    splits = split_of(cfg)

    def job(i: int) -> dict:
        try:
            return write_scene(root, cfg, seed, i, splits[i])
        except OSError as exc:
            raise SimulationError(f"cannot write scene {scene_id(i)}: {exc}") from exc

    summaries = parallel_map(job, range(cfg.n_scenes), threads)
    manifest = {
        "seed": seed,
        "config": cfg.to_dict(),
        "splits": {s: [m["scene_id"] for m in summaries if m["split"] == s] for s in SPLITS},
        "frames": sum(m["frames"] for m in summaries),
        "uls_frames": sum(m["uls_frames"] for m in summaries),
    }
    try:
        write_json(root / "dataset.json", manifest)
    except OSError as exc:
        raise SimulationError(f"cannot write manifest: {exc}") from exc
    return manifest
