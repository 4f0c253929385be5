"""Run configuration: presets, JSON loading and flag overrides."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from .errors import ConfigError, FormatError
from .fisheye import CameraExtrinsics, FisheyeIntrinsics
from .geometry import FIDELITY_GRID, GridSpec
from .io import calib_from_dict, read_json
from .nn.model import NetworkConfig
from .sim import SimConfig, default_extrinsics, default_intrinsics
from .train import TrainConfig
from .ultrasonic import SensorLayout, default_rear_layout

PRESETS = ("desk", "fidelity")


@dataclass
class EvalConfig:
    by_range: bool = False
    camera_range: float = 6.0


@dataclass
class RunConfig:
    preset: str = "desk"
    grid: GridSpec = field(default_factory=GridSpec)
    layout_path: Optional[str] = None
    calib_path: Optional[str] = None
    network: NetworkConfig = field(default_factory=NetworkConfig.desk)
    trainer: TrainConfig = field(default_factory=TrainConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset_root: str = "data"
    output_root: str = "runs"

    def __post_init__(self):
        for name in ("layout_path", "calib_path"):
            p = getattr(self, name)
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{name} {p!r} does not exist")

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "grid": self.grid.to_dict(),
            "layout_path": self.layout_path,
            "calib_path": self.calib_path,
            "network": self.network.to_dict(),
            "trainer": self.trainer.to_dict(),
            "sim": {k: v for k, v in self.sim.to_dict().items() if k not in ("grid", "calib", "layout")},
            "eval": dataclasses.asdict(self.eval),
            "dataset_root": self.dataset_root,
            "output_root": self.output_root,
        }


def fidelity_intrinsics() -> FisheyeIntrinsics:
    base = default_intrinsics()
    s = 4.0
    return FisheyeIntrinsics(base.fx * s, base.fy * s, (256 - 1) / 2, (256 - 1) / 2, base.k, 256, 256)


def preset(name: str) -> Dict[str, Any]:
    """Base values for a preset, before file and flag overrides."""
    if name == "desk":
        return {
            "grid": GridSpec(),
            "network": NetworkConfig.desk().to_dict(),
            "trainer": {},
            "sim": {},
            "intrinsics": default_intrinsics(),
        }
    if name == "fidelity":
        return {
            "grid": FIDELITY_GRID,
            "network": NetworkConfig.fidelity().to_dict(),
            "trainer": {},
            "sim": {"n_scenes": 35},
            "intrinsics": fidelity_intrinsics(),
        }
    raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")


def _section(d: dict, key: str) -> dict:
    v = d.get(key, {})
    if not isinstance(v, dict):
        raise ConfigError(f"config section {key!r} must be an object")
    return v


def _build(cls, values: dict, what: str):
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(values) - known
    if extra:
        raise ConfigError(f"unknown {what} keys {sorted(extra)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {what} values: {exc}") from exc


_SIM_TUPLES = ("split_counts", "split_fractions", "obstacles_per_scene", "shape_probs", "box_size_m",
               "cylinder_radius_m", "height_m", "reflectivity", "speed_mps", "yaw_rate")


def build_config(raw: Optional[dict] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Merge preset <- JSON document <- flag overrides (flags win).

    ``overrides`` uses dotted keys, e.g. ``{"trainer.seed": 3, "sim.n_scenes": 35}``.
    """
    raw = dict(raw or {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        head, _, tail = key.partition(".")
        if tail:
            sec = dict(_section(raw, head))
            sec[tail] = value
            raw[head] = sec
        else:
            raw[key] = value
    name = raw.get("preset", "desk")
    base = preset(name)
    unknown = set(raw) - {"preset", "grid", "layout_path", "calib_path", "network", "trainer", "sim", "eval",
                          "dataset_root", "output_root"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")

    grid = GridSpec.from_dict(raw["grid"]) if "grid" in raw else base["grid"]
    network = _build(NetworkConfig, {**base["network"], **_section(raw, "network")}, "network")
    trainer = _build(TrainConfig, {**base["trainer"], **_section(raw, "trainer")}, "trainer")

    layout_path, calib_path = raw.get("layout_path"), raw.get("calib_path")
    layout = default_rear_layout()
    intr, extr = base["intrinsics"], default_extrinsics()
    try:
        if layout_path is not None:
            layout = SensorLayout.from_dict(read_json(layout_path))
        if calib_path is not None:
            intr, extr = calib_from_dict(read_json(calib_path))
    except FormatError as exc:
        raise ConfigError(str(exc)) from exc

    sim_vals = {**base["sim"], **_section(raw, "sim")}
    for k in _SIM_TUPLES:
        if k in sim_vals and sim_vals[k] is not None:
            sim_vals[k] = tuple(sim_vals[k])
    if "azimuth_half_span_deg" in sim_vals:
        sim_vals["azimuth_half_span"] = math.radians(sim_vals.pop("azimuth_half_span_deg"))
    sim_vals.update(grid=grid, intrinsics=intr, extrinsics=extr, layout=layout)
    sim = _build(SimConfig, sim_vals, "sim")
    ev = _build(EvalConfig, _section(raw, "eval"), "eval")
    return RunConfig(name, grid, layout_path, calib_path, network, trainer, sim, ev,
                     str(raw.get("dataset_root", "data")), str(raw.get("output_root", "runs")))


def load_config(path=None, overrides: Optional[dict] = None) -> RunConfig:
    raw = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = read_json(path)
        except FormatError as exc:
            raise ConfigError(str(exc)) from exc
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    return build_config(raw, overrides)
