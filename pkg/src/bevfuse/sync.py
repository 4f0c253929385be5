"""Camera / ultrasonic association and ego-motion compensation."""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import SyncError
from .geometry import BevGrid, Pose2D, wrap_angle

MAX_ODOMETRY_GAP_MS = 200.0
_SNAP = 1e-9


@dataclass(frozen=True)
class OdometrySample:
    timestamp: float
    pose: Pose2D


@dataclass(frozen=True)
class FramePair:
    camera_ts: float
    uls_ts: float
    pose_delta: Pose2D
    uls_index: int = -1
    camera_index: int = -1


def _check_sorted(ts: Sequence[float], what: str, strict: bool = False) -> None:
    for a, b in zip(ts, ts[1:]):
        if b < a or (strict and b == a):
            raise SyncError(f"{what} timestamps are not {'strictly ' if strict else ''}increasing")


def interpolate_pose(odo: Sequence[OdometrySample], t: float) -> Pose2D:
    """Pose at ``t``: linear in x, y and shortest-arc linear in yaw."""
    ts = [s.timestamp for s in odo]
    if not odo or t < ts[0] or t > ts[-1]:
        raise SyncError(f"odometry does not cover t={t} ms")
    i = bisect.bisect_left(ts, t)
    if ts[i] == t:
        return odo[i].pose
    a, b = odo[i - 1], odo[i]
    if b.timestamp - a.timestamp > MAX_ODOMETRY_GAP_MS:
        raise SyncError(
            f"odometry gap of {b.timestamp - a.timestamp:.1f} ms around t={t} ms exceeds {MAX_ODOMETRY_GAP_MS:.0f} ms"
        )
    w = (t - a.timestamp) / (b.timestamp - a.timestamp)
    pa, pb = a.pose, b.pose
    dyaw = wrap_angle(pb.yaw - pa.yaw)
    return Pose2D(pa.x + w * (pb.x - pa.x), pa.y + w * (pb.y - pa.y), pa.yaw + w * dyaw)


def match_frames(camera_ts: Sequence[float], uls_frames, odo: Sequence[OdometrySample]) -> List[FramePair]:
    """Pair each camera frame with the latest ultrasonic frame at or before it.

    ``uls_frames`` may be UltrasonicFrame objects or bare timestamps. Camera
    frames older than every ultrasonic frame are dropped.
    """
    uls_ts = [float(getattr(f, "timestamp", f)) for f in uls_frames]
    if not uls_ts:
        raise SyncError("empty ultrasonic stream")
    _check_sorted(list(camera_ts), "camera")
    _check_sorted(uls_ts, "ultrasonic")
    _check_sorted([s.timestamp for s in odo], "odometry", strict=True)
    pairs = []
    for ci, t in enumerate(camera_ts):
        j = bisect.bisect_right(uls_ts, t) - 1
        if j < 0:
            continue
        p_uls = interpolate_pose(odo, uls_ts[j])
        p_cam = interpolate_pose(odo, t)
        delta = p_uls.inverse().compose(p_cam)
        pairs.append(FramePair(float(t), uls_ts[j], delta, j, ci))
    return pairs


def _snap(x: np.ndarray) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < _SNAP, r, x)


def compensate_ego_motion(grid: BevGrid, pose_delta: Pose2D) -> BevGrid:
    """Warp a grid measured at the ultrasonic time into the camera-time frame.

    ``pose_delta`` is the camera-time vehicle pose expressed in the
    ultrasonic-time vehicle frame; each destination cell pulls from the
    source at ``pose_delta`` applied to its centre (bilinear, zero outside).
    """
    if pose_delta.is_identity():
        return BevGrid(grid.spec, grid.data.copy())
    spec = grid.spec
    src_pts = pose_delta.apply(spec.cell_centers())
    fr, fc = spec.fractional_index(src_pts)
    fr = _snap(fr - 0.5)
    fc = _snap(fc - 0.5)
    r0 = np.floor(fr).astype(np.int64)
    c0 = np.floor(fc).astype(np.int64)
    tr = (fr - r0)[..., None]
    tc = (fc - c0)[..., None]
    src = grid.data
    rows, cols = spec.shape
    out = np.zeros(src.shape, dtype=np.float64)
    for dr, wr in ((0, 1.0 - tr), (1, tr)):
        for dc, wc in ((0, 1.0 - tc), (1, tc)):
            rr, cc = r0 + dr, c0 + dc
            ok = (rr >= 0) & (rr < rows) & (cc >= 0) & (cc < cols)
            w = (wr * wc) * ok[..., None]
            vals = src[np.clip(rr, 0, rows - 1), np.clip(cc, 0, cols - 1)]
            out += np.where(w != 0.0, w * vals, 0.0)
    return BevGrid(spec, out)
