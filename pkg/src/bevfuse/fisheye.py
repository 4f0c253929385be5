"""Kannala-Brandt fisheye camera model.

The distortion is an odd polynomial of the incidence angle theta,
``d(theta) = theta + k1 theta^3 + k2 theta^5 + k3 theta^7 + k4 theta^9``,
and a camera-frame point (x, y, z) projects to
``(fx d(theta) x / r + cx, fy d(theta) y / r + cy)`` with ``r = hypot(x, y)``.

Camera frame: z along the optical axis, x to the image right, y down.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .errors import CameraModelError, ConvergenceError

DEFAULT_THETA_MAX = math.radians(100.0)
NEWTON_TOL = 1e-10
NEWTON_MAX_ITER = 50

# Metric depth bands covered by each pyramid level, far to near.
DEPTH_BANDS_M = ((3.2, 6.0), (1.6, 3.2), (0.8, 1.6), (0.4, 0.8), (0.2, 0.4))
DEFAULT_HEIGHT_RANGE = (0.0, 1.2)


@dataclass(frozen=True)
class FisheyeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    k: Tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    width: int = 64
    height: int = 64
    theta_max: float = DEFAULT_THETA_MAX

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(float(v) for v in self.k))
        if len(self.k) != 4:
            raise CameraModelError("expected exactly four distortion coefficients k1..k4")
        if not (self.fx > 0 and self.fy > 0):
            raise CameraModelError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CameraModelError("principal point outside the image")
        if not (0 < self.theta_max < math.pi):
            raise CameraModelError("theta_max must lie in (0, pi)")
        thetas = np.arange(0.0, self.theta_max + 1e-3, 1e-3)
        thetas[-1] = min(thetas[-1], self.theta_max)
        if np.any(np.diff(_poly(thetas, self.k)) <= 0):
            raise CameraModelError("d(theta) is not strictly increasing on [0, theta_max]")

    @property
    def r_max(self) -> float:
        """Normalised radius d(theta_max): the edge of the valid image disc."""
        return float(_poly(self.theta_max, self.k))

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "k1": self.k[0], "k2": self.k[1], "k3": self.k[2], "k4": self.k[3],
            "width": self.width, "height": self.height,
            "theta_max": self.theta_max,
        }


def _poly(theta, k):
    t2 = theta * theta
    return theta * (1.0 + t2 * (k[0] + t2 * (k[1] + t2 * (k[2] + t2 * k[3]))))


def _dpoly(theta, k):
    t2 = theta * theta
    return 1.0 + t2 * (3 * k[0] + t2 * (5 * k[1] + t2 * (7 * k[2] + t2 * 9 * k[3])))


def distortion(theta, intr: FisheyeIntrinsics):
    """d(theta); theta must lie in [0, theta_max]."""
    th = np.asarray(theta, dtype=np.float64)
    if np.any(th < 0) or np.any(th > intr.theta_max):
        raise CameraModelError(f"theta outside [0, {intr.theta_max:.4f}] rad")
    out = _poly(th, intr.k)
    return float(out) if out.ndim == 0 else out


def project(p, intr: FisheyeIntrinsics) -> np.ndarray:
    """Project camera-frame point(s) ``p[..., 3]`` to pixels ``[..., 2]``."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.hypot(x, y)
    on_axis = r == 0
    if np.any(on_axis & (z <= 0)):
        raise CameraModelError("cannot project the camera origin or a point on the rear optical axis")
    theta = np.arctan2(r, z)
    d = _poly(theta, intr.k)
    safe_r = np.where(on_axis, 1.0, r)
    scale = np.where(on_axis, 0.0, d / safe_r)
    u = intr.fx * scale * x + intr.cx
    v = intr.fy * scale * y + intr.cy
    return np.stack([u, v], axis=-1)


def solve_incidence(rd: float, intr: FisheyeIntrinsics) -> Tuple[float, int]:
    """Invert d(theta) = rd by clamped Newton steps; returns (theta, iterations)."""
    theta = min(rd, intr.theta_max)
    residual = _poly(theta, intr.k) - rd
    for it in range(1, NEWTON_MAX_ITER + 1):
        step = residual / _dpoly(theta, intr.k)
        theta = min(max(theta - step, 0.0), intr.theta_max)
        residual = _poly(theta, intr.k) - rd
        if abs(step) < NEWTON_TOL:
            return theta, it
    raise ConvergenceError("Newton inversion of d(theta) did not converge", abs(residual))


def unproject(pixel, intr: FisheyeIntrinsics, check_bounds: bool = True) -> np.ndarray:
    """Unit ray in the camera frame for pixel ``(u, v)``."""
    u, v = float(pixel[0]), float(pixel[1])
    if check_bounds and not (0 <= u <= intr.width - 1 and 0 <= v <= intr.height - 1):
        raise CameraModelError(f"pixel {(u, v)} outside the {intr.width}x{intr.height} image")
    mx = (u - intr.cx) / intr.fx
    my = (v - intr.cy) / intr.fy
    rd = math.hypot(mx, my)
    if rd == 0.0:
        return np.array([0.0, 0.0, 1.0])
    if rd > intr.r_max:
        raise CameraModelError(f"pixel {(u, v)} beyond the valid fisheye radius")
    theta, _ = solve_incidence(rd, intr)
    s = math.sin(theta)
    return np.array([s * mx / rd, s * my / rd, math.cos(theta)])


def unproject_many(pixels, intr: FisheyeIntrinsics) -> np.ndarray:
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    return np.stack([unproject(px, intr, check_bounds=False) for px in pixels])


# --------------------------------------------------------------------------
# extrinsics


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# Columns are the camera x (right), y (down), z (optical) axes of a level
# camera looking along vehicle +x.
_BASE = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class CameraExtrinsics:
    """Camera mounting pose in the vehicle frame.

    Angles are applied as extrinsic rotations in the order pitch (about
    vehicle y, positive tilts the view down), yaw (about vehicle z),
    roll (about vehicle x), starting from a level camera looking along +x.
    """

    x: float = 0.0
    y: float = 0.0
    z: float = 1.0
    pitch: float = 0.0
    yaw: float = 0.0
    roll: float = 0.0

    def __post_init__(self):
        r = self.rotation
        if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-9:
            raise CameraModelError("extrinsic rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        """Camera-to-vehicle rotation (columns = camera axes in vehicle frame)."""
        return _rx(self.roll) @ _rz(self.yaw) @ _ry(self.pitch) @ _BASE

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def vehicle_to_camera(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return (p - self.position) @ self.rotation

    def camera_to_vehicle(self, p) -> np.ndarray:
        return np.asarray(p, dtype=np.float64) @ self.rotation.T + self.position

    @property
    def ground_heading(self) -> float:
        """Azimuth of the optical axis projected onto the ground plane."""
        axis = self.rotation[:, 2]
        return math.atan2(axis[1], axis[0])

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "z": self.z, "pitch": self.pitch, "yaw": self.yaw, "roll": self.roll}


@dataclass(frozen=True)
class DepthBand:
    z_min: float
    z_max: float
    y_min: float = DEFAULT_HEIGHT_RANGE[0]
    y_max: float = DEFAULT_HEIGHT_RANGE[1]

    def __post_init__(self):
        if not (0 < self.z_min < self.z_max):
            raise CameraModelError(f"invalid depth band [{self.z_min}, {self.z_max}]")
        if not (self.y_min < self.y_max):
            raise CameraModelError(f"invalid height range [{self.y_min}, {self.y_max}]")


def default_bands(height_range: Sequence[float] = DEFAULT_HEIGHT_RANGE):
    return [DepthBand(a, b, *height_range) for a, b in DEPTH_BANDS_M]


def crop_bounds(intr: FisheyeIntrinsics, extr: CameraExtrinsics, band: DepthBand) -> Tuple[int, int]:
    """Image rows ``[v_min, v_max)`` spanned by ``band`` at the central azimuth."""
    heading = extr.ground_heading
    dx, dy = math.cos(heading), math.sin(heading)
    vs = []
    for depth in (band.z_min, band.z_max):
        for h in (band.y_min, band.y_max):
            pv = np.array([extr.x + depth * dx, extr.y + depth * dy, h])
            pc = extr.vehicle_to_camera(pv)
            theta = math.atan2(math.hypot(pc[0], pc[1]), pc[2])
            if theta > intr.theta_max:
                # Outside the lens model: pin to the image edge on that side.
                vs.append(-np.inf if pc[1] < 0 else np.inf)
                continue
            vs.append(float(project(pc, intr)[1]))
    lo, hi = min(vs), max(vs)
    if hi < -0.5 or lo > intr.height - 0.5:
        raise CameraModelError(f"depth band {band.z_min}-{band.z_max} m projects outside the image")
    # Pixel centres sit on integer coordinates.
    v_min = max(0, int(math.floor(max(lo, -1.0) + 0.5)))
    v_max = min(intr.height, int(math.floor(min(hi, float(intr.height)) + 0.5)) + 1)
    return v_min, v_max


def column_azimuths(intr: FisheyeIntrinsics, extr: CameraExtrinsics, columns) -> np.ndarray:
    """Vehicle-frame azimuth seen by each image column along the central row."""
    out = []
    for u in np.asarray(columns, dtype=np.float64):
        ray = unproject((u, intr.cy), intr, check_bounds=False)
        rv = extr.rotation @ ray
        out.append(math.atan2(rv[1], rv[0]))
    return np.unwrap(np.array(out))
