"""Fusion network: camera pyramid -> polar BEV -> Cartesian BEV, ultrasonic
BEV encoder, content-aware dilated fusion and the two-stage occupancy decoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ConfigError, ShapeError
from ..fisheye import CameraExtrinsics, DepthBand, FisheyeIntrinsics, crop_bounds
from ..geometry import GridSpec
from . import tensor as T
from .bev import PolarGeometry, PolarHead, polar_geometry, polar_to_ortho_matrix
from .layers import AdaptiveDilatedConv2d, Conv2d, ConvBNReLU, ConvTranspose2d, Module
from .tensor import Tensor

MODES = ("multimodal", "visible", "uls")


@dataclass
class NetworkConfig:
    levels: int = 5
    encoder_channels: Tuple[int, ...] = (16, 32, 32, 64, 64)
    neck_channels: int = 16
    band_levels: Tuple[int, ...] = (0, 1, 2, 3, 4)
    depth_bins: Tuple[int, ...] = (8, 6, 4, 3, 2)
    bands: Tuple[Tuple[float, float], ...] = ((3.2, 6.0), (1.6, 3.2), (0.8, 1.6), (0.4, 0.8), (0.2, 0.4))
    height_range: Tuple[float, float] = (0.0, 1.2)
    uls_channels: int = 16
    fused_channels: int = 16
    decoder_growth: int = 8
    decoder_up_channels: int = 16
    decoder_head_hidden: int = 16
    dilations: Tuple[int, ...] = (1, 2, 3, 4)
    tau: float = 1.0
    tau_decay: float = 0.95
    recurrent_prior: bool = False
    camfuse_layers: int = 1
    num_classes: int = 2
    bev_downsample: int = 2

    def __post_init__(self):
        self.encoder_channels = tuple(self.encoder_channels)
        self.band_levels = tuple(self.band_levels)
        self.depth_bins = tuple(self.depth_bins)
        self.bands = tuple(tuple(b) for b in self.bands)
        self.height_range = tuple(self.height_range)
        self.dilations = tuple(self.dilations)
        if self.levels < 1 or len(self.encoder_channels) != self.levels:
            raise ConfigError("need one encoder channel count per pyramid level")
        if not (len(self.bands) == len(self.band_levels) == len(self.depth_bins)):
            raise ConfigError("bands, band_levels and depth_bins must have equal length")
        if any(not 0 <= l < self.levels for l in self.band_levels):
            raise ConfigError("band level index outside the pyramid")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if len(self.dilations) < 2 or min(self.dilations) < 1:
            raise ConfigError("need at least two positive dilation options")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown network config keys {sorted(extra)}")
        return cls(**d)

    @classmethod
    def fidelity(cls) -> "NetworkConfig":
        return cls()

    @classmethod
    def desk(cls) -> "NetworkConfig":
        """Three pyramid levels and slim decoder channels for single-core runs."""
        return cls(
            levels=3,
            encoder_channels=(8, 12, 16),
            neck_channels=8,
            band_levels=(0, 1, 2, 2, 2),
            uls_channels=8,
            fused_channels=8,
            decoder_growth=4,
            decoder_up_channels=4,
            decoder_head_hidden=8,
        )


class CameraEncoder(Module):
    """Strided-conv pyramid with top-down upsample-and-concat merging."""

    def __init__(self, cfg: NetworkConfig, in_channels: int = 1, rng=None):
        super().__init__()
        ch = cfg.encoder_channels
        self.down = []
        prev = in_channels
        for i, c in enumerate(ch):
            self.down.append(self.add_child(f"down{i}", ConvBNReLU(prev, c, 3, 2, rng)))
            prev = c
        self.merge = {}
        for i in range(cfg.levels - 2, -1, -1):
            self.merge[i] = self.add_child(f"merge{i}", ConvBNReLU(ch[i] + ch[i + 1], ch[i], 3, 1, rng))

    def forward(self, img: Tensor) -> List[Tensor]:
        feats = []
        x = img
        for block in self.down:
            x = block(x)
            feats.append(x)
        out = [None] * len(feats)
        out[-1] = feats[-1]
        for i in range(len(feats) - 2, -1, -1):
            up = T.upsample2x(out[i + 1])
            up = up[:, :, : feats[i].shape[2], : feats[i].shape[3]]
            out[i] = self.merge[i](T.concat([feats[i], up], axis=1))
        return out


@dataclass
class BandPlan:
    band: DepthBand
    level: int
    rows: Tuple[int, int]  # feature-map rows [lo, hi)
    geometry: PolarGeometry
    matrix: object


class CameraBev(Module):
    """Encoder pyramid, per-level 16-channel neck, per-band polar heads and resampling."""

    def __init__(self, cfg: NetworkConfig, intr: FisheyeIntrinsics, extr: CameraExtrinsics, bev_spec: GridSpec, rng=None):
        super().__init__()
        self.cfg = cfg
        self.encoder = self.add_child("encoder", CameraEncoder(cfg, 1, rng))
        self.necks = [self.add_child(f"neck{i}", ConvBNReLU(c, cfg.neck_channels, 3, 1, rng))
                      for i, c in enumerate(cfg.encoder_channels)]
        self.plans: List[BandPlan] = []
        self.heads = []
        for b, ((z0, z1), level, bins) in enumerate(zip(cfg.bands, cfg.band_levels, cfg.depth_bins)):
            band = DepthBand(z0, z1, *cfg.height_range)
            stride = 2 ** (level + 1)
            fh = math.ceil(intr.height / stride)
            fw = math.ceil(intr.width / stride)
            v0, v1 = crop_bounds(intr, extr, band)
            r0 = min(v0 // stride, fh - 1)
            r1 = max(min(-(-v1 // stride), fh), r0 + 1)
            geom = polar_geometry(intr, extr, band, bins, fw, stride)
            self.plans.append(BandPlan(band, level, (r0, r1), geom, polar_to_ortho_matrix(geom, bev_spec)))
            self.heads.append(self.add_child(f"polar{b}", PolarHead(cfg.neck_channels, r1 - r0, cfg.neck_channels, bins, rng)))
        self.bev_spec = bev_spec

    def forward(self, img: Tensor) -> Tensor:
        feats = self.encoder(img)
        necked = {}
        out = None
        for plan, head in zip(self.plans, self.heads):
            if plan.level not in necked:
                necked[plan.level] = self.necks[plan.level](feats[plan.level])
            f = necked[plan.level][:, :, plan.rows[0] : plan.rows[1], :]
            polar = head(f)
            cart = T.sparse_resample(polar, plan.matrix, self.bev_spec.shape)
            out = cart if out is None else T.add(out, cart)
        return out


class UltrasonicEncoder(Module):
    def __init__(self, cfg: NetworkConfig, rng=None):
        super().__init__()
        ds = cfg.bev_downsample
        if ds not in (1, 2, 4):
            raise ConfigError("bev_downsample must be 1, 2 or 4")
        blocks = []
        prev = 1
        mid = max(cfg.uls_channels // 2, 4)
        n_down = int(round(math.log2(ds)))
        for i in range(n_down):
            blocks.append(ConvBNReLU(prev, mid, 3, 2, rng))
            prev = mid
        blocks.append(ConvBNReLU(prev, cfg.uls_channels, 3, 1, rng))
        blocks.append(ConvBNReLU(cfg.uls_channels, cfg.uls_channels, 3, 1, rng))
        self.blocks = [self.add_child(f"block{i}", b) for i, b in enumerate(blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class CaMFuse(Module):
    """Content-aware dilated conv on ultrasonic features, concat with camera
    features, then a 1x1 projection back to ``fused_channels``.

    With ``with_camera=False`` the concat is skipped (ultrasonic-only model).
    """

    def __init__(self, cfg: NetworkConfig, with_camera: bool = True, rng=None):
        super().__init__()
        self.with_camera = with_camera
        self.adaptive = [
            self.add_child(f"adaptive{i}", AdaptiveDilatedConv2d(cfg.uls_channels, cfg.uls_channels, 3, cfg.dilations,
                                                                  cfg.recurrent_prior, rng))
            for i in range(cfg.camfuse_layers)
        ]
        cin = cfg.uls_channels + (cfg.neck_channels if with_camera else 0)
        self.project = self.add_child("project", Conv2d(cin, cfg.fused_channels, 1, rng=rng))

    def set_tau(self, tau: float) -> None:
        for a in self.adaptive:
            a.tau = tau

    def forward(self, cam_bev: Optional[Tensor], uls_feat: Tensor, rng=None) -> Tensor:
        x = uls_feat
        prev = None
        for i, layer in enumerate(self.adaptive):
            x = layer(x, rng, prev)
            if i < len(self.adaptive) - 1:
                x = T.relu(x)
            prev = layer.last_logits
        if self.with_camera:
            if cam_bev is None or cam_bev.shape[2:] != x.shape[2:]:
                raise ShapeError("camera and ultrasonic BEV features must share spatial dims")
            x = T.concat([cam_bev, x], axis=1)
        return self.project(x)


class OccupancyDecoder(Module):
    """Stage 1 keeps resolution and grows channels by concatenation; stage 2
    doubles resolution with parallel 4x4/2x2 transpose convs."""

    def __init__(self, cfg: NetworkConfig, in_channels: int = 16, rng=None):
        super().__init__()
        g = cfg.decoder_growth
        self.stage1 = []
        c = in_channels
        for i in range(2):
            a = self.add_child(f"s1_{i}a", Conv2d(c, g, 3, rng=rng))
            b = self.add_child(f"s1_{i}b", Conv2d(g, g, 3, rng=rng))
            self.stage1.append((a, b))
            c += g
        self.stage1_channels = c
        up = cfg.decoder_up_channels
        self.up4 = self.add_child("up4", ConvTranspose2d(c, up, 4, 2, 1, rng))
        self.up2 = self.add_child("up2", ConvTranspose2d(c, up, 2, 2, 0, rng))
        self.refine = self.add_child("refine", Conv2d(up, up, 3, rng=rng))
        self.mix_a = self.add_child("mix_a", Conv2d(2 * up, 2 * up, 3, rng=rng))
        self.mix_b = self.add_child("mix_b", Conv2d(2 * up, 2 * up, 3, rng=rng))
        self.head_a = self.add_child("head_a", Conv2d(4 * up, cfg.decoder_head_hidden, 1, rng=rng))
        self.head_b = self.add_child("head_b", Conv2d(cfg.decoder_head_hidden, cfg.num_classes, 1, rng=rng))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[2] < 4 or x.shape[3] < 4:
            raise ShapeError(f"decoder input {x.shape[2:]} below the 4x4 minimum")
        for a, b in self.stage1:
            y = T.relu(b(T.relu(a(x))))
            x = T.concat([x, y], axis=1)
        p4 = T.relu(self.refine(T.relu(self.up4(x))))
        p2 = T.relu(self.up2(x))
        cat = T.concat([p4, p2], axis=1)
        y = T.relu(self.mix_b(T.relu(self.mix_a(cat))))
        y = T.concat([y, cat], axis=1)
        return self.head_b(T.relu(self.head_a(y)))


def decoder_forward(fused: Tensor, decoder: OccupancyDecoder) -> Tensor:
    return decoder(fused)


class FusionNet(Module):
    """Full model; ``mode`` selects multimodal, visible-only or ultrasonic-only."""

    def __init__(self, cfg: NetworkConfig, intr: FisheyeIntrinsics, extr: CameraExtrinsics, grid: GridSpec,
                 mode: str = "multimodal", seed: int = 0):
        super().__init__()
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        self.cfg, self.mode, self.grid = cfg, mode, grid
        self.bev_spec = grid.scaled(cfg.bev_downsample)
        rng = np.random.default_rng(seed)
        self.camera = self.add_child("camera", CameraBev(cfg, intr, extr, self.bev_spec, rng)) if mode != "uls" else None
        self.uls = self.add_child("uls", UltrasonicEncoder(cfg, rng)) if mode != "visible" else None
        self.camfuse = self.add_child("camfuse", CaMFuse(cfg, mode == "multimodal", rng)) if mode != "visible" else None
        dec_in = cfg.neck_channels if mode == "visible" else cfg.fused_channels
        self.decoder = self.add_child("decoder", OccupancyDecoder(cfg, dec_in, rng))
        self._init_background_prior()
        self.set_tau(cfg.tau)

    def _init_background_prior(self, obstacle_fraction: float = 0.02) -> None:
        b = self.decoder.head_b.bias.data
        b[:] = 0.0
        b[1:] = math.log(obstacle_fraction / (1 - obstacle_fraction))

    def set_tau(self, tau: float) -> None:
        self.tau = tau
        if self.camfuse is not None:
            self.camfuse.set_tau(tau)

    def forward(self, image: Optional[Tensor], uls: Optional[Tensor], rng: Optional[np.random.Generator] = None) -> Tensor:
        cam = self.camera(image) if self.camera is not None else None
        if self.mode == "visible":
            fused = cam
        else:
            uf = self.uls(uls)
            if uf.shape[2:] != self.bev_spec.shape:
                raise ShapeError(f"ultrasonic features {uf.shape[2:]} do not match BEV grid {self.bev_spec.shape}")
            fused = self.camfuse(cam, uf, rng)
        logits = self.decoder(fused)
        if logits.shape[2:] != self.grid.shape:
            raise ShapeError(f"decoder output {logits.shape[2:]} does not match grid {self.grid.shape}")
        return logits
