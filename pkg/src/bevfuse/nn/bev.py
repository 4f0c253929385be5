"""Image-space to polar-BEV head and polar-to-Cartesian resampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import sparse

from ..errors import ShapeError
from ..fisheye import CameraExtrinsics, DepthBand, FisheyeIntrinsics, column_azimuths
from ..geometry import GridSpec
from . import tensor as T
from .layers import Module
from .tensor import Tensor


def image_to_polar_bev(x: Tensor, weight: Tensor, bias: Tensor, depth_bins: int) -> Tensor:
    """Per-column dense map from (C_in * rows) to (C_out * depth_bins).

    ``x`` is (N, C_in, rows, cols); the result is (N, C_out, depth_bins, cols).
    """
    n, c, rows, cols = x.shape
    if weight.shape[0] != c * rows:
        raise ShapeError(f"polar head expects {weight.shape[0]} = C*rows inputs, got {c}*{rows}")
    cout = weight.shape[1] // depth_bins
    flat = T.reshape(T.transpose(x, (0, 3, 1, 2)), (n * cols, c * rows))
    y = T.add(T.matmul(flat, weight), bias)
    y = T.reshape(y, (n, cols, cout, depth_bins))
    return T.transpose(y, (0, 2, 3, 1))


class PolarHead(Module):
    def __init__(self, cin, rows, cout, depth_bins, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.rows, self.depth_bins = rows, depth_bins
        fan_in = cin * rows
        self.weight = self.add_param("weight", rng.normal(0.0, math.sqrt(1.0 / fan_in), size=(fan_in, cout * depth_bins)))
        self.bias = self.add_param("bias", np.zeros(cout * depth_bins))

    def forward(self, x):
        if x.shape[2] != self.rows:
            raise ShapeError(f"polar head trained for {self.rows} rows, got {x.shape[2]}")
        return image_to_polar_bev(x, self.weight, self.bias, self.depth_bins)


@dataclass(frozen=True)
class PolarGeometry:
    """Where a polar map lives: depth bins over a band, columns over azimuth."""

    band: DepthBand
    depth_bins: int
    column_azimuth: np.ndarray  # (cols,), NaN where the column is off the lens
    origin: Tuple[float, float]  # camera ground position in the vehicle frame

    @property
    def cols(self) -> int:
        return self.column_azimuth.size

    @property
    def bin_size(self) -> float:
        return (self.band.z_max - self.band.z_min) / self.depth_bins


def polar_geometry(intr: FisheyeIntrinsics, extr: CameraExtrinsics, band: DepthBand, depth_bins: int,
                   cols: int, col_stride: float = 1.0) -> PolarGeometry:
    """Azimuth of each feature column, from central-row unprojection of its pixel centre."""
    u = (np.arange(cols) + 0.5) * col_stride - 0.5
    valid = np.abs(u - intr.cx) / intr.fx <= intr.r_max
    az = np.full(cols, np.nan)
    if valid.any():
        az[valid] = column_azimuths(intr, extr, u[valid])
        # Keep the table on one continuous branch around the optical heading.
        az[valid] += 2 * math.pi * np.round((extr.ground_heading - np.nanmean(az[valid])) / (2 * math.pi))
    return PolarGeometry(band, depth_bins, az, (extr.x, extr.y))


def _cell_polar(geom: PolarGeometry, centers: np.ndarray):
    d = centers - np.asarray(geom.origin)
    rho = np.hypot(d[..., 0], d[..., 1])
    phi = np.arctan2(d[..., 1], d[..., 0])
    ref = np.nanmean(geom.column_azimuth)
    phi = phi + 2 * math.pi * np.round((ref - phi) / (2 * math.pi))
    return rho, phi


def polar_to_ortho_matrix(geom: PolarGeometry, spec: GridSpec) -> sparse.csr_matrix:
    """Sparse (rows*cols, depth_bins*polar_cols) bilinear resampling matrix."""
    centers = spec.cell_centers().reshape(-1, 2)
    rho, phi = _cell_polar(geom, centers)
    az = geom.column_azimuth
    ok_cols = np.nonzero(np.isfinite(az))[0]
    a, idx = az[ok_cols], ok_cols.astype(np.float64)
    if a.size >= 2 and a[-1] < a[0]:
        a, idx = a[::-1], idx[::-1]
    band = geom.band
    inside = (rho >= band.z_min) & (rho < band.z_max) & (phi >= a[0]) & (phi <= a[-1])
    cells = np.nonzero(inside)[0]
    colf = np.interp(phi[cells], a, idx)
    depf = np.clip((rho[cells] - band.z_min) / geom.bin_size - 0.5, 0.0, geom.depth_bins - 1)
    c0 = np.floor(colf).astype(np.int64)
    d0 = np.floor(depf).astype(np.int64)
    tc, td = colf - c0, depf - d0
    rows_i, cols_i, vals = [], [], []
    for dd, wd in ((0, 1.0 - td), (1, td)):
        for dc, wc in ((0, 1.0 - tc), (1, tc)):
            w = wd * wc
            keep = w > 0
            di = np.minimum(d0 + dd, geom.depth_bins - 1)[keep]
            ci = np.minimum(c0 + dc, geom.cols - 1)[keep]
            rows_i.append(cells[keep])
            cols_i.append(di * geom.cols + ci)
            vals.append(w[keep])
    m = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows_i), np.concatenate(cols_i))),
        shape=(spec.rows * spec.cols, geom.depth_bins * geom.cols),
    )
    return m.tocsr()


def polar_to_ortho(polar: Tensor, geom: PolarGeometry, spec: GridSpec, matrix=None) -> Tensor:
    """Resample (N, C, depth_bins, cols) polar features onto the Cartesian grid."""
    if polar.shape[2:] != (geom.depth_bins, geom.cols):
        raise ShapeError(f"polar map {polar.shape[2:]} does not match geometry {(geom.depth_bins, geom.cols)}")
    if matrix is None:
        matrix = polar_to_ortho_matrix(geom, spec)
    return T.sparse_resample(polar, matrix, spec.shape)


def polar_to_ortho_bruteforce(polar: np.ndarray, geom: PolarGeometry, spec: GridSpec) -> np.ndarray:
    """Per-cell scalar resampler of a single (depth_bins, cols) polar map."""
    out = np.zeros(spec.shape)
    az = [float(v) for v in geom.column_azimuth]
    valid = [j for j, v in enumerate(az) if math.isfinite(v)]
    ref = sum(az[j] for j in valid) / len(valid)
    centers = spec.cell_centers()
    for r in range(spec.rows):
        for c in range(spec.cols):
            dx = centers[r, c, 0] - geom.origin[0]
            dy = centers[r, c, 1] - geom.origin[1]
            rho = math.hypot(dx, dy)
            if not (geom.band.z_min <= rho < geom.band.z_max):
                continue
            phi = math.atan2(dy, dx)
            phi += 2 * math.pi * round((ref - phi) / (2 * math.pi))
            colf = None
            for j0, j1 in zip(valid, valid[1:]):
                lo, hi = az[j0], az[j1]
                if min(lo, hi) <= phi <= max(lo, hi):
                    colf = j0 + (phi - lo) / (hi - lo) * (j1 - j0)
                    break
            if colf is None:
                continue
            depf = (rho - geom.band.z_min) / geom.bin_size - 0.5
            depf = min(max(depf, 0.0), geom.depth_bins - 1)
            val = 0.0
            for dk in range(geom.depth_bins):
                wd = max(0.0, 1.0 - abs(depf - dk))
                if wd == 0.0:
                    continue
                for j in range(geom.cols):
                    wc = max(0.0, 1.0 - abs(colf - j))
                    if wc:
                        val += wd * wc * polar[dk, j]
            out[r, c] = val
    return out
