"""Sample preparation, the training loop and evaluation for the fusion net."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, MetricsError
from .geometry import BevGrid, GridSpec, Pose2D
from .io import SceneData, list_split, load_scene
from .metrics import (RANGE_BANDS_M, MetricsReport, ObstacleInstance, distance_terms, extract_obstacles,
                      range_band_label, scores_from_counts, confusion_counts)
from .nn import tensor as T
from .nn.losses import cce_loss, mse_loss
from .nn.model import FusionNet, NetworkConfig
from .nn.optim import DEFAULT_LR, Adam
from .nn.tensor import Tensor, no_grad
from .runtime import parallel_map, single_threaded_blas
from .sync import compensate_ego_motion
from .ultrasonic import fill_grid

DEFAULT_BATCH = 8
DEFAULT_EPOCHS = 100


@dataclass
class TrainConfig:
    lr: float = DEFAULT_LR
    batch_size: int = DEFAULT_BATCH
    epochs: int = DEFAULT_EPOCHS
    seed: int = 0
    frames_per_scene: Optional[int] = None
    uls_blob_sigma_m: float = 0.15
    hflip: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.frames_per_scene is not None and self.frames_per_scene < 1:
            raise ConfigError("frames_per_scene must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Sample:
    scene_id: str
    frame: int
    image: np.ndarray  # (H, W) in [-0.5, 0.5]
    uls: np.ndarray  # (rows, cols) compensated amplitude grid, raw
    gt: np.ndarray  # (rows, cols) bool
    grid: GridSpec


def uls_grid_for_frame(scene: SceneData, k: int) -> BevGrid:
    """Ultrasonic amplitude grid for camera frame ``k``, warped to camera time."""
    rec = scene.frames[k]
    raw = fill_grid(scene.uls_frames[rec["uls_index"]], scene.layout, scene.grid)
    return compensate_ego_motion(raw, Pose2D(*rec["pose_delta"]))


def frame_subset(n: int, limit: Optional[int]) -> List[int]:
    if limit is None or limit >= n:
        return list(range(n))
    return sorted({int(round(i)) for i in np.linspace(0, n - 1, limit)})


def load_samples(dataset_root, split: str, frames_per_scene: Optional[int] = None,
                 threads: Optional[int] = None) -> List[Sample]:
    scenes = [load_scene(p) for p in list_split(dataset_root, split)]
    jobs = [(s, k) for s in scenes for k in frame_subset(len(s.frames), frames_per_scene)]

    def build(job):
        s, k = job
        with single_threaded_blas():
            img = s.image(k).astype(np.float64) / 255.0 - 0.5
            return Sample(s.scene_id, s.frames[k]["index"], img, uls_grid_for_frame(s, k).data[..., 0], s.gt_mask(k), s.grid)

    return parallel_map(build, jobs, threads)


def uls_input(amplitudes: np.ndarray) -> np.ndarray:
    """Compress the amplitude dynamic range before it enters the network."""
    return np.log1p(np.maximum(amplitudes, 0.0))


def batch_arrays(samples: Sequence[Sample], flips: Optional[Sequence[bool]] = None
                 ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked network inputs; ``flips`` mirrors chosen samples left-right."""
    img = np.stack([s.image for s in samples])[:, None]
    uls = np.stack([uls_input(s.uls) for s in samples])[:, None]
    gt = np.stack([s.gt for s in samples])
    if flips is not None:
        f = np.asarray(flips, dtype=bool)
        img[f] = img[f][..., ::-1]
        uls[f] = uls[f][..., ::-1]
        gt[f] = gt[f][..., ::-1]
    return img, uls, gt


def _mirrored(p: Pose2D) -> Pose2D:
    return Pose2D(p.x, -p.y, -p.yaw)


def is_mirror_symmetric(scene: SceneData, tol: float = 1e-9) -> bool:
    """True if reflecting y -> -y maps the rig onto itself, so that a
    left-right flip of image, ultrasonic grid and labels is a valid sample."""
    intr, extr, spec = scene.intrinsics, scene.extrinsics, scene.grid
    if abs(intr.cx - (intr.width - 1) / 2) > tol or abs(extr.y) > tol or abs(extr.roll) > tol:
        return False
    if abs(math.sin(extr.yaw)) > tol or abs(spec.anchor.y) > tol or abs(math.sin(spec.anchor.yaw)) > tol:
        return False
    layout = scene.layout
    mirror_of = {}
    for s in layout.sensors:
        m = _mirrored(s.pose)
        match = [o.id for o in layout.sensors
                 if abs(o.pose.x - m.x) < tol and abs(o.pose.y - m.y) < tol
                 and abs(math.remainder(o.pose.yaw - m.yaw, 2 * math.pi)) < tol]
        if not match:
            return False
        mirror_of[s.id] = match[0]
    ways = {frozenset(w) for w in layout.signalways}
    return all(frozenset((mirror_of[a], mirror_of[b])) in ways for a, b in layout.signalways)


def one_hot(mask: np.ndarray, classes: int = 2) -> np.ndarray:
    lab = mask.astype(np.int64)
    out = np.zeros((lab.shape[0], classes) + lab.shape[1:])
    for c in range(classes):
        out[:, c] = lab == c
    return out


def centroid_targets(gt: np.ndarray, spec: GridSpec, sigma_m: float) -> np.ndarray:
    """Gaussian blobs at each ground-truth instance centroid, peak 1."""
    centers = spec.cell_centers()
    out = np.zeros(gt.shape)
    for b in range(gt.shape[0]):
        for inst in extract_obstacles(gt[b], spec):
            d2 = np.sum((centers - inst.centroid) ** 2, axis=-1)
            out[b] = np.maximum(out[b], np.exp(-0.5 * d2 / sigma_m ** 2))
    return out


def obstacle_probability(logits: Tensor) -> Tensor:
    return T.softmax(logits, axis=1)[:, 1]


def batch_loss(net: FusionNet, samples: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator,
               flips: Optional[Sequence[bool]] = None) -> Tensor:
    img, uls, gt = batch_arrays(samples, flips)
    logits = net(Tensor(img), Tensor(uls), rng)
    if net.mode == "uls":
        return mse_loss(obstacle_probability(logits), centroid_targets(gt, samples[0].grid, cfg.uls_blob_sigma_m))
    return cce_loss(logits, one_hot(gt, net.cfg.num_classes))


@dataclass
class EpochLog:
    epoch: int
    step: int
    loss: float
    tau: float


def train(net: FusionNet, samples: Sequence[Sample], cfg: TrainConfig,
          on_epoch: Optional[Callable[[int, float], None]] = None) -> List[EpochLog]:
    """Adam over shuffled mini-batches; one graph per batch. Returns per-step losses."""
    if not samples:
        raise ConfigError("no training samples")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    opt = Adam(net.parameters(), lr=cfg.lr)
    log: List[EpochLog] = []
    step = 0
    net.train()
    with single_threaded_blas():
        for epoch in range(cfg.epochs):
            tau = net.cfg.tau * net.cfg.tau_decay ** epoch
            net.set_tau(tau)
            order = rng.permutation(len(samples))
            losses = []
            for i in range(0, len(order), cfg.batch_size):
                batch = [samples[j] for j in order[i : i + cfg.batch_size]]
                opt.zero_grad()
                flips = rng.random(len(batch)) < 0.5 if cfg.hflip else None
                loss = batch_loss(net, batch, cfg, rng, flips)
                loss.backward()
                opt.step()
                losses.append(loss.item())
                log.append(EpochLog(epoch, step, loss.item(), tau))
                step += 1
            if on_epoch is not None:
                on_epoch(epoch, float(np.mean(losses)))
    net.eval()
    return log


def epoch_means(log: Sequence[EpochLog]) -> List[float]:
    by: Dict[int, List[float]] = {}
    for e in log:
        by.setdefault(e.epoch, []).append(e.loss)
    return [float(np.mean(by[k])) for k in sorted(by)]


def write_loss_csv(path, log: Sequence[EpochLog]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "loss", "tau"])
        for e in log:
            w.writerow([e.epoch, e.step, repr(e.loss), repr(e.tau)])


def predict(net: FusionNet, samples: Sequence[Sample], batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Boolean obstacle masks, (N, rows, cols)."""
    net.eval()
    out = []
    with no_grad(), single_threaded_blas():
        for i in range(0, len(samples), batch_size):
            img, uls, _ = batch_arrays(samples[i : i + batch_size])
            prob = obstacle_probability(net(Tensor(img), Tensor(uls)))
            out.append(prob.data > 0.5)
    return np.concatenate(out) if out else np.zeros((0,) + samples[0].gt.shape if samples else (0, 0, 0), dtype=bool)


# -- evaluation -------------------------------------------------------------------


@dataclass
class _Acc:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    e: List[float] = None
    d: List[float] = None
    nd: List[float] = None
    matched: int = 0
    missed: int = 0
    spurious: int = 0

    def __post_init__(self):
        self.e, self.d, self.nd = [], [], []

    def report(self, label: str) -> MetricsReport:
        r, dice, p, iou = scores_from_counts(self.tp, self.fp, self.fn)
        rep = MetricsReport(label, r, dice, p, iou, matched=self.matched, missed=self.missed, spurious=self.spurious)
        if self.e:
            n = len(self.e)
            rep.distance_D, rep.norm_distance_ND, rep.euclidean_E = sum(self.d) / n, sum(self.nd) / n, sum(self.e) / n
        return rep


def evaluate(pred: np.ndarray, gt: np.ndarray, spec: GridSpec, labels: Sequence[str], ego: Pose2D = Pose2D(),
             camera_range: float = 6.0, by_range: bool = False) -> List[MetricsReport]:
    """Per-frame rows, then an aggregate row pooled over frames, then optional range-band rows.

    Range-band rows pool cells whose centre lies in the band and gt
    instances whose centroid does; every gt instance lands in exactly one band.
    """
    if pred.shape != gt.shape or len(labels) != pred.shape[0]:
        raise MetricsError("prediction, ground truth and labels disagree in frame count or shape")
    centers = spec.cell_centers()
    ego_xy = np.array([ego.x, ego.y])
    cell_range = np.hypot(*(centers - ego_xy).transpose(2, 0, 1))
    bands = [f"{lo:g}-{hi:g}" for lo, hi in RANGE_BANDS_M] + [f">{RANGE_BANDS_M[-1][1]:g}"]
    band_acc = {b: _Acc() for b in bands}
    cell_band = np.vectorize(range_band_label, otypes=[object])(cell_range)
    total = _Acc()
    rows = []
    for k in range(pred.shape[0]):
        acc = _Acc()
        tp, fp, fn = confusion_counts(pred[k], gt[k])
        acc.tp, acc.fp, acc.fn = tp, fp, fn
        g_inst = extract_obstacles(gt[k], spec)
        p_inst = extract_obstacles(pred[k], spec)
        if g_inst:
            terms = distance_terms([g.bev_xy for g in g_inst], [p.bev_xy for p in p_inst], (ego.y, ego.x), camera_range)
            acc.e, acc.d, acc.nd = terms.e, terms.d, terms.nd
            acc.matched, acc.missed = terms.matched, terms.missed
            if by_range:
                for g, e, d, nd, hit in zip(g_inst, terms.e, terms.d, terms.nd, terms.hit):
                    b = band_acc[range_band_label(float(np.hypot(*(g.centroid - ego_xy))))]
                    b.e.append(e)
                    b.d.append(d)
                    b.nd.append(nd)
                    b.matched += hit
                    b.missed += not hit
        acc.spurious = len(p_inst) - acc.matched
        rows.append(acc.report(labels[k]))
        for name in ("tp", "fp", "fn", "matched", "missed", "spurious"):
            setattr(total, name, getattr(total, name) + getattr(acc, name))
        total.e += acc.e
        total.d += acc.d
        total.nd += acc.nd
        if by_range:
            for b in bands:
                sel = cell_band == b
                t2, f2, n2 = confusion_counts(pred[k][sel], gt[k][sel])
                band_acc[b].tp += t2
                band_acc[b].fp += f2
                band_acc[b].fn += n2
    rows.append(total.report("aggregate"))
    if by_range:
        for b in bands:
            rows.append(band_acc[b].report(f"range:{b}"))
    return rows


def build_network(net_cfg: NetworkConfig, scene: SceneData, mode: str, seed: int) -> FusionNet:
    return FusionNet(net_cfg, scene.intrinsics, scene.extrinsics, scene.grid, mode, seed)
