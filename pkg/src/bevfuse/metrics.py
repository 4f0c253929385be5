"""Occupancy and obstacle-distance metrics.

Distance metrics work in a BEV (X, Y) convention: X is lateral, Y the
longitudinal (rearward) axis, so the absolute distance error compares the
Y components. Vehicle-frame centroids (x forward, y left) are mapped to
(X, Y) = (y, x); the swap leaves every Euclidean quantity unchanged.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import MetricsError
from .geometry import BevGrid, GridSpec, Pose2D

DEFAULT_CAMERA_RANGE_M = 6.0
RANGE_BANDS_M = ((0.0, 1.45), (1.45, 2.9), (2.9, 4.35), (4.35, 5.8))

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass(frozen=True, eq=False)
class ObstacleInstance:
    cells: Tuple[Tuple[int, int], ...]
    centroid: np.ndarray  # vehicle frame, metres

    @property
    def bev_xy(self) -> np.ndarray:
        return np.array([self.centroid[1], self.centroid[0]])


@dataclass
class MetricsReport:
    label: str = "aggregate"
    recall: float = float("nan")
    dice: float = float("nan")
    precision: float = float("nan")
    iou: float = float("nan")
    distance_D: float = float("nan")
    norm_distance_ND: float = float("nan")
    euclidean_E: float = float("nan")
    matched: int = 0
    missed: int = 0
    spurious: int = 0


REPORT_COLUMNS = [f.name for f in fields(MetricsReport)]


def _ratio(num: float, den: float) -> float:
    # 0/0 is a vacuous pass (nothing to find, nothing wrongly found).
    return 1.0 if den == 0 else num / den


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> Tuple[int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def scores_from_counts(tp: int, fp: int, fn: int) -> Tuple[float, float, float, float]:
    recall = _ratio(tp, tp + fn)
    precision = _ratio(tp, tp + fp)
    dice = _ratio(2 * tp, 2 * tp + fp + fn)
    iou = _ratio(tp, tp + fp + fn)
    return recall, dice, precision, iou


def _mask(g) -> np.ndarray:
    if isinstance(g, BevGrid):
        return g.labels()
    return np.asarray(g) > 0


def occupancy_metrics(pred, gt) -> Tuple[float, float, float, float]:
    """(recall, dice, precision, iou) of the obstacle class, cellwise."""
    if isinstance(pred, BevGrid) and isinstance(gt, BevGrid) and pred.spec != gt.spec:
        raise MetricsError("prediction and ground truth use different grid specs")
    p, g = _mask(pred), _mask(gt)
    if p.shape != g.shape:
        raise MetricsError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return scores_from_counts(*confusion_counts(p, g))


def extract_obstacles(mask, spec: Optional[GridSpec] = None) -> List[ObstacleInstance]:
    """4-connected obstacle components ordered by (min row, min col)."""
    if isinstance(mask, BevGrid):
        spec = mask.spec
    m = _mask(mask)
    if spec is None:
        raise MetricsError("a GridSpec is needed to place obstacle centroids")
    labels, n = ndimage.label(m, structure=_FOUR_CONNECTED)
    centers = spec.cell_centers()
    found = []
    for k in range(1, n + 1):
        rr, cc = np.nonzero(labels == k)
        order = np.lexsort((cc, rr))
        rr, cc = rr[order], cc[order]
        centroid = centers[rr, cc].mean(axis=0)
        found.append((int(rr[0]), int(cc.min()), ObstacleInstance(tuple(zip(rr.tolist(), cc.tolist())), centroid)))
    found.sort(key=lambda t: (t[0], t[1]))
    return [inst for _, _, inst in found]


def greedy_match(gt_xy: np.ndarray, pred_xy: np.ndarray) -> List[Tuple[int, int]]:
    """One-to-one matching by ascending distance; ties go to the smaller gt index."""
    cand = []
    for i, g in enumerate(gt_xy):
        for j, p in enumerate(pred_xy):
            cand.append((float(np.hypot(*(g - p))), i, j))
    cand.sort()
    used_g, used_p, pairs = set(), set(), []
    for _, i, j in cand:
        if i in used_g or j in used_p:
            continue
        used_g.add(i)
        used_p.add(j)
        pairs.append((i, j))
    return sorted(pairs)


@dataclass
class DistanceTerms:
    """Per-gt-instance contributions before averaging."""

    e: List[float]
    d: List[float]
    nd: List[float]
    matched: int
    missed: int
    spurious: int
    hit: List[bool] = field(default_factory=list)  # per gt instance: matched or not

    def means(self) -> Tuple[float, float, float]:
        if not self.e:
            raise MetricsError("distance metrics are undefined without ground-truth instances")
        n = len(self.e)
        return sum(self.d) / n, sum(self.nd) / n, sum(self.e) / n


def distance_terms(
    gt_xy,
    pred_xy,
    ego_xy=(0.0, 0.0),
    camera_range: float = DEFAULT_CAMERA_RANGE_M,
    nd_cap: Optional[float] = None,
) -> DistanceTerms:
    """Per-instance E, D, N_D terms for points in the BEV (X, Y) convention."""
    if not camera_range > 0:
        raise MetricsError("camera_range must be positive")
    gt_xy = np.asarray(gt_xy, dtype=np.float64).reshape(-1, 2)
    pred_xy = np.asarray(pred_xy, dtype=np.float64).reshape(-1, 2)
    ego = np.asarray(ego_xy, dtype=np.float64)
    pairs = dict(greedy_match(gt_xy, pred_xy))
    e, d, nd = [], [], []
    for i, t in enumerate(gt_xy):
        to_ego = float(np.hypot(*(t - ego)))
        if i in pairs:
            p = pred_xy[pairs[i]]
        else:
            # Miss: stand-in prediction is the point of the camera-range disc
            # farthest from the target, i.e. behind the ego on the target ray.
            u = (t - ego) / to_ego if to_ego > 0 else np.array([0.0, 1.0])
            p = ego - camera_range * u
        err = float(np.hypot(*(t - p)))
        ratio = err / to_ego if to_ego > 0 else float("inf")
        if nd_cap is not None and i not in pairs:
            ratio = min(ratio, nd_cap)
        e.append(err)
        d.append(abs(float(t[1] - p[1])))
        nd.append(ratio)
    matched = len(pairs)
    hit = [i in pairs for i in range(len(gt_xy))]
    return DistanceTerms(e, d, nd, matched, len(gt_xy) - matched, len(pred_xy) - matched, hit)


def distance_metrics_xy(gt_xy, pred_xy, ego_xy=(0.0, 0.0), camera_range=DEFAULT_CAMERA_RANGE_M, nd_cap=None):
    """(D, N_D, E) averaged over gt points given in BEV (X, Y) coordinates."""
    return distance_terms(gt_xy, pred_xy, ego_xy, camera_range, nd_cap).means()


def distance_metrics(
    pred: Sequence[ObstacleInstance],
    gt: Sequence[ObstacleInstance],
    ego: Pose2D = Pose2D(),
    camera_range: float = DEFAULT_CAMERA_RANGE_M,
    nd_cap: Optional[float] = None,
) -> Tuple[float, float, float]:
    """(D, N_D, E) for instance lists; misses use the farthest-point rule."""
    return distance_metrics_xy(
        [g.bev_xy for g in gt], [p.bev_xy for p in pred], (ego.y, ego.x), camera_range, nd_cap
    )


def range_band_label(r: float) -> str:
    for lo, hi in RANGE_BANDS_M:
        if lo <= r < hi:
            return f"{lo:g}-{hi:g}"
    return f">{RANGE_BANDS_M[-1][1]:g}"


def write_report_csv(path, reports: Iterable[MetricsReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            row = []
            for name in REPORT_COLUMNS:
                v = getattr(r, name)
                row.append(f"{v:.6f}" if isinstance(v, float) else v)
            w.writerow(row)


def read_report_csv(path) -> List[MetricsReport]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            kw = {}
            for f in fields(MetricsReport):
                raw = rec[f.name]
                kw[f.name] = raw if f.type in ("str", str) else (int(raw) if f.type in ("int", int) else float(raw))
            out.append(MetricsReport(**kw))
    return out
