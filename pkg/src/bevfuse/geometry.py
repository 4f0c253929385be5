"""Planar vehicle-frame geometry and the metric BEV raster.

Vehicle frame follows ISO 8855: x forward, y left, z up. The BEV grid is
anchored at the camera position; row 0 touches the camera and rows grow
rearward, column 0 is the +y (left) edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .errors import GeometryError


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]."""
    if np.ndim(a) == 0:
        a = float(a)
        w = math.fmod(a + math.pi, 2.0 * math.pi)
        if w <= 0.0:
            w += 2.0 * math.pi
        return w - math.pi
    a = np.asarray(a, dtype=np.float64)
    w = np.fmod(a + np.pi, 2.0 * np.pi)
    w = np.where(w <= 0.0, w + 2.0 * np.pi, w)
    return w - np.pi


@dataclass(frozen=True)
class Pose2D:
    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", wrap_angle(self.yaw))

    @classmethod
    def identity(cls) -> "Pose2D":
        return cls(0.0, 0.0, 0.0)

    def apply(self, p):
        """Map point(s) ``p[..., 2]`` from this pose's local frame to its parent frame."""
        p = np.asarray(p, dtype=np.float64)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        x = c * p[..., 0] - s * p[..., 1] + self.x
        y = s * p[..., 0] + c * p[..., 1] + self.y
        return np.stack([x, y], axis=-1)

    def compose(self, other: "Pose2D") -> "Pose2D":
        x, y = self.apply((other.x, other.y))
        return Pose2D(x, y, self.yaw + other.yaw)

    def inverse(self) -> "Pose2D":
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return Pose2D(-(c * self.x + s * self.y), s * self.x - c * self.y, -self.yaw)

    def is_identity(self) -> bool:
        return self.x == 0.0 and self.y == 0.0 and self.yaw == 0.0

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.x, self.y, self.yaw)


def pose_apply(pose: Pose2D, p):
    return pose.apply(p)


def pose_compose(a: Pose2D, b: Pose2D) -> Pose2D:
    return a.compose(b)


def pose_inverse(a: Pose2D) -> Pose2D:
    return a.inverse()


def _integral_ratio(extent: float, cell: float, what: str) -> int:
    n = extent / cell
    k = int(round(n))
    if k <= 0 or abs(n - k) > 1e-6 * max(1.0, n):
        raise GeometryError(f"{what} {extent} m is not an integral multiple of cell size {cell} m")
    return k


@dataclass(frozen=True)
class GridSpec:
    lateral_half_extent: float = 6.0
    rear_extent: float = 6.0
    cell_size: float = 0.05
    anchor: Pose2D = field(default_factory=Pose2D.identity)

    def __post_init__(self):
        if not (self.cell_size > 0):
            raise GeometryError(f"cell_size must be positive, got {self.cell_size}")
        if not (self.lateral_half_extent > 0 and self.rear_extent > 0):
            raise GeometryError("grid extents must be positive")
        _integral_ratio(2.0 * self.lateral_half_extent, self.cell_size, "lateral extent")
        _integral_ratio(self.rear_extent, self.cell_size, "rear extent")

    @property
    def rows(self) -> int:
        return _integral_ratio(self.rear_extent, self.cell_size, "rear extent")

    @property
    def cols(self) -> int:
        return _integral_ratio(2.0 * self.lateral_half_extent, self.cell_size, "lateral extent")

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.rows, self.cols)

    def scaled(self, factor: int) -> "GridSpec":
        """Same extent with cells ``factor`` times larger."""
        return GridSpec(self.lateral_half_extent, self.rear_extent, self.cell_size * factor, self.anchor)

    # -- vectorised helpers -------------------------------------------------

    def to_local(self, p):
        """Vehicle-frame point(s) -> (rearward, leftward) offsets from the anchor."""
        local = self.anchor.inverse().apply(p)
        return -local[..., 0], local[..., 1]

    def fractional_index(self, p):
        """Continuous (row, col) coordinates; integer values are cell edges."""
        rear, left = self.to_local(p)
        return rear / self.cell_size, (self.lateral_half_extent - left) / self.cell_size

    def cell_centers(self) -> np.ndarray:
        """(rows, cols, 2) vehicle-frame centres of every cell."""
        rear = (np.arange(self.rows) + 0.5) * self.cell_size
        left = self.lateral_half_extent - (np.arange(self.cols) + 0.5) * self.cell_size
        local = np.empty((self.rows, self.cols, 2))
        local[..., 0] = -rear[:, None]
        local[..., 1] = left[None, :]
        return self.anchor.apply(local)

    def to_dict(self) -> dict:
        return {
            "lateral_half_extent": self.lateral_half_extent,
            "rear_extent": self.rear_extent,
            "cell_size": self.cell_size,
            "anchor": list(self.anchor.as_tuple()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        anchor = d.get("anchor", (0.0, 0.0, 0.0))
        if isinstance(anchor, dict):
            anchor = Pose2D(anchor.get("x", 0.0), anchor.get("y", 0.0), anchor.get("yaw", 0.0))
        else:
            anchor = Pose2D(*anchor)
        return cls(
            float(d.get("lateral_half_extent", 6.0)),
            float(d.get("rear_extent", 6.0)),
            float(d.get("cell_size", 0.05)),
            anchor,
        )


FIDELITY_GRID = GridSpec(6.0, 6.0, 0.01)


def world_to_cell(spec: GridSpec, p) -> Optional[Tuple[int, int]]:
    """Cell containing vehicle-frame point ``p``, or None outside the grid.

    Cells are half-open: a point on a boundary belongs to the larger index.
    """
    fr, fc = spec.fractional_index(np.asarray(p, dtype=np.float64))
    row, col = math.floor(float(fr)), math.floor(float(fc))
    if 0 <= row < spec.rows and 0 <= col < spec.cols:
        return row, col
    return None


def world_to_cells(spec: GridSpec, pts) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised world_to_cell: returns (rows, cols, valid)."""
    fr, fc = spec.fractional_index(np.asarray(pts, dtype=np.float64))
    row = np.floor(fr).astype(np.int64)
    col = np.floor(fc).astype(np.int64)
    valid = (row >= 0) & (row < spec.rows) & (col >= 0) & (col < spec.cols)
    return row, col, valid


def cell_center(spec: GridSpec, idx) -> np.ndarray:
    row, col = int(idx[0]), int(idx[1])
    if not (0 <= row < spec.rows and 0 <= col < spec.cols):
        raise GeometryError(f"cell index {(row, col)} outside grid {spec.shape}")
    local = np.array([-(row + 0.5) * spec.cell_size, spec.lateral_half_extent - (col + 0.5) * spec.cell_size])
    return spec.anchor.apply(local)


@dataclass(frozen=True, eq=False)
class BevGrid:
    spec: GridSpec
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.shape[:2] != self.spec.shape:
            raise GeometryError(f"raster shape {data.shape[:2]} does not match grid {self.spec.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, spec: GridSpec, channels: int = 1, dtype=np.float64) -> "BevGrid":
        return cls(spec, np.zeros(spec.shape + (channels,), dtype=dtype))

    def labels(self) -> np.ndarray:
        """2-D boolean obstacle mask from channel 0."""
        return self.data[:, :, 0] > 0
