"""Ultrasonic echo envelopes and the echo-to-BEV amplitude mapper.

Each signalway (emitter S1 -> receiver S2) contributes, at every grid cell
``c``, the envelope amplitude at round-trip distance ``|c-S1| + |c-S2|``,
attenuated off-axis at both sensors by a Beta(2,2)-shaped weight whose
support narrows with range. Contributions are summed over signalways.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import UltrasonicError
from .geometry import BevGrid, GridSpec, Pose2D, cell_center, wrap_angle

RADIAL_FOV_M = 4.5
DEFAULT_SPACING_M = 0.02
HALF_ANGLE_NEAR = math.radians(65.0)
HALF_ANGLE_FAR = math.radians(35.0)


@dataclass(frozen=True, eq=False)
class EchoEnvelope:
    emitter_id: int
    receiver_id: int
    amplitudes: np.ndarray
    sample_spacing: float = DEFAULT_SPACING_M

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.float64)
        if amps.ndim != 1 or amps.size < 2:
            raise UltrasonicError("envelope needs a 1-D array of at least two samples")
        if np.any(amps < 0) or not np.all(np.isfinite(amps)):
            raise UltrasonicError("envelope amplitudes must be finite and non-negative")
        if not self.sample_spacing > 0:
            raise UltrasonicError("sample spacing must be positive")
        if self.max_distance_of(amps.size) >= 2 * RADIAL_FOV_M + 1e-9:
            raise UltrasonicError(
                f"envelope listens to {self.max_distance_of(amps.size):.2f} m round trip, "
                f"beyond the {2 * RADIAL_FOV_M} m window"
            )
        object.__setattr__(self, "amplitudes", amps)

    def max_distance_of(self, n: int) -> float:
        return (n - 1) * self.sample_spacing

    @property
    def max_distance(self) -> float:
        return self.max_distance_of(self.amplitudes.size)


@dataclass(frozen=True)
class UltrasonicFrame:
    timestamp: float
    envelopes: Tuple[EchoEnvelope, ...]

    def __post_init__(self):
        envs = tuple(self.envelopes)
        if not envs:
            raise UltrasonicError("ultrasonic frame has no envelopes")
        if len({round(e.sample_spacing, 12) for e in envs}) != 1:
            raise UltrasonicError("all envelopes in a frame must share one sample spacing")
        object.__setattr__(self, "envelopes", envs)


@dataclass(frozen=True)
class UltrasonicSensor:
    id: int
    pose: Pose2D


@dataclass(frozen=True)
class SensorLayout:
    sensors: Tuple[UltrasonicSensor, ...]
    half_angle_near: float = HALF_ANGLE_NEAR
    half_angle_far: float = HALF_ANGLE_FAR
    max_range: float = RADIAL_FOV_M
    signalways: Tuple[Tuple[int, int], ...] = ()

    def __post_init__(self):
        sensors = tuple(self.sensors)
        if not sensors:
            raise UltrasonicError("layout needs at least one sensor")
        if not (0 < self.half_angle_far <= self.half_angle_near <= math.pi / 2):
            raise UltrasonicError("require 0 < half_angle_far <= half_angle_near <= pi/2")
        if not self.max_range > 0:
            raise UltrasonicError("max_range must be positive")
        object.__setattr__(self, "sensors", sensors)
        ways = tuple((int(a), int(b)) for a, b in self.signalways)
        ids = {s.id for s in sensors}
        for a, b in ways:
            if a not in ids or b not in ids:
                raise UltrasonicError(f"signalway {(a, b)} references an unknown sensor")
        object.__setattr__(self, "signalways", ways)

    def sensor(self, sid: int) -> UltrasonicSensor:
        for s in self.sensors:
            if s.id == sid:
                return s
        raise UltrasonicError(f"unknown sensor id {sid}")

    def to_dict(self) -> dict:
        return {
            "sensors": [{"id": s.id, "x": s.pose.x, "y": s.pose.y, "yaw": s.pose.yaw} for s in self.sensors],
            "half_angle_near": self.half_angle_near,
            "half_angle_far": self.half_angle_far,
            "max_range": self.max_range,
            "signalways": [list(w) for w in self.signalways],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorLayout":
        sensors = tuple(UltrasonicSensor(int(s["id"]), Pose2D(s["x"], s["y"], s["yaw"])) for s in d["sensors"])
        return cls(
            sensors,
            float(d.get("half_angle_near", HALF_ANGLE_NEAR)),
            float(d.get("half_angle_far", HALF_ANGLE_FAR)),
            float(d.get("max_range", RADIAL_FOV_M)),
            tuple(tuple(w) for w in d.get("signalways", ())),
        )


def default_rear_layout(bumper_x: float = 0.0) -> SensorLayout:
    """Six rear-bumper sensors, outer ones angled outward.

    Signalways: six mono-static plus the bistatic pairs (1->2) and (3->4).
    """
    ys = (0.80, 0.55, 0.20, -0.20, -0.55, -0.80)
    yaws = (math.pi - 1.05, math.pi - 0.45, math.pi - 0.10, -math.pi + 0.10, -math.pi + 0.45, -math.pi + 1.05)
    xs = (bumper_x + 0.10, bumper_x + 0.04, bumper_x, bumper_x, bumper_x + 0.04, bumper_x + 0.10)
    sensors = tuple(UltrasonicSensor(i, Pose2D(x, y, yaw)) for i, (x, y, yaw) in enumerate(zip(xs, ys, yaws)))
    ways = tuple((i, i) for i in range(6)) + ((1, 2), (3, 4))
    return SensorLayout(sensors, signalways=ways)


def attenuation_weight(alpha, half_angle):
    """Beta(2,2) density on x = (1 + alpha/h)/2, scaled to 1 on-axis.

    4 x (1 - x) = 1 - (alpha/h)^2 inside the cone, 0 outside.
    """
    if np.any(np.asarray(half_angle) <= 0):
        raise UltrasonicError("half_angle must be positive")
    ratio = np.asarray(alpha, dtype=np.float64) / half_angle
    w = np.where(np.abs(ratio) <= 1.0, 1.0 - ratio * ratio, 0.0)
    return float(w) if w.ndim == 0 else w


def sample_envelope(env: EchoEnvelope, round_trip):
    """Linear interpolation of the envelope at ``round_trip`` metres; 0 past the end."""
    d = np.asarray(round_trip, dtype=np.float64)
    if np.any(d < 0):
        raise UltrasonicError("round-trip distance must be non-negative")
    amps = env.amplitudes
    pos = d / env.sample_spacing
    k = np.minimum(np.floor(pos).astype(np.int64), amps.size - 1)
    frac = pos - k
    k1 = np.minimum(k + 1, amps.size - 1)
    out = amps[k] * (1.0 - frac) + amps[k1] * frac
    # Exact samples bypass the blend so k == last stays amps[-1].
    out = np.where(frac == 0.0, amps[k], out)
    out = np.where(d > env.max_distance, 0.0, out)
    return float(out) if out.ndim == 0 else out


def effective_half_angle(layout: SensorLayout, rng):
    """Opening half-angle shrinking linearly from near to far up to max_range."""
    r = np.clip(np.asarray(rng, dtype=np.float64) / layout.max_range, 0.0, 1.0)
    h = layout.half_angle_near + (layout.half_angle_far - layout.half_angle_near) * r
    return float(h) if h.ndim == 0 else h


def _check_ids(frame: UltrasonicFrame, layout: SensorLayout) -> None:
    ids = {s.id for s in layout.sensors}
    for env in frame.envelopes:
        if env.emitter_id not in ids or env.receiver_id not in ids:
            raise UltrasonicError(f"signalway {env.emitter_id}->{env.receiver_id} uses an unknown sensor id")


def signalway_contribution(env: EchoEnvelope, layout: SensorLayout, centers: np.ndarray) -> np.ndarray:
    """Amplitude one signalway deposits at points ``centers[..., 2]``."""
    s1 = layout.sensor(env.emitter_id).pose
    s2 = layout.sensor(env.receiver_id).pose
    v1 = centers - np.array([s1.x, s1.y])
    v2 = centers - np.array([s2.x, s2.y])
    d1 = np.hypot(v1[..., 0], v1[..., 1])
    d2 = np.hypot(v2[..., 0], v2[..., 1])
    a1 = wrap_angle(np.arctan2(v1[..., 1], v1[..., 0]) - s1.yaw)
    a2 = wrap_angle(np.arctan2(v2[..., 1], v2[..., 0]) - s2.yaw)
    w1 = attenuation_weight(a1, effective_half_angle(layout, d1))
    w2 = attenuation_weight(a2, effective_half_angle(layout, d2))
    return sample_envelope(env, d1 + d2) * w1 * w2


def fill_grid(frame: UltrasonicFrame, layout: SensorLayout, spec: GridSpec) -> BevGrid:
    """Sum of attenuated, distance-interpolated echo amplitudes per cell."""
    _check_ids(frame, layout)
    centers = spec.cell_centers()
    acc = np.zeros(spec.shape)
    for env in frame.envelopes:
        acc += signalway_contribution(env, layout, centers)
    return BevGrid(spec, acc[:, :, None])


def fill_grid_oracle(frame: UltrasonicFrame, layout: SensorLayout, spec: GridSpec) -> BevGrid:
    """Reference mapper: one scalar evaluation per (cell, signalway)."""
    _check_ids(frame, layout)
    poses: Dict[int, Pose2D] = {s.id: s.pose for s in layout.sensors}
    near, far, max_range = layout.half_angle_near, layout.half_angle_far, layout.max_range
    ways = [(env.emitter_id, env.receiver_id, env.amplitudes.tolist(), env.sample_spacing) for env in frame.envelopes]
    out = np.zeros((spec.rows, spec.cols, 1))
    for row in range(spec.rows):
        for col in range(spec.cols):
            cx, cy = cell_center(spec, (row, col))
            # Per-sensor range and cone weight, shared by every signalway using that sensor.
            dist: Dict[int, float] = {}
            weight: Dict[int, float] = {}
            for sid, p in poses.items():
                d = math.sqrt((cx - p.x) ** 2 + (cy - p.y) ** 2)
                a = math.atan2(cy - p.y, cx - p.x) - p.yaw
                a = math.atan2(math.sin(a), math.cos(a))
                h = near + (far - near) * min(d / max_range, 1.0)
                dist[sid] = d
                weight[sid] = 1.0 - (a / h) ** 2 if abs(a) <= h else 0.0
            total = 0.0
            for e, r, amps, spacing in ways:
                w = weight[e] * weight[r]
                if w == 0.0:
                    continue
                travel = dist[e] + dist[r]
                n = len(amps)
                if travel > (n - 1) * spacing:
                    continue
                pos = travel / spacing
                k = int(math.floor(pos))
                if k >= n - 1:
                    amp = amps[n - 1]
                else:
                    t = pos - k
                    amp = amps[k] * (1.0 - t) + amps[k + 1] * t
                total += amp * w
            out[row, col, 0] = total
    return BevGrid(spec, out)
