"""On-disk formats: PGM/PPM rasters, calibration and layout JSON, odometry
CSV, ultrasonic JSON lines and per-scene loading."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import FormatError
from .fisheye import CameraExtrinsics, FisheyeIntrinsics
from .geometry import GridSpec, Pose2D
from .sync import OdometrySample
from .ultrasonic import EchoEnvelope, SensorLayout, UltrasonicFrame


def _open_checked(path, mode):
    try:
        return open(path, mode)
    except FileNotFoundError as exc:
        raise FormatError(f"missing file {path}") from exc


# -- rasters -----------------------------------------------------------------


def write_pgm(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise FormatError("PGM output needs a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(np.ascontiguousarray(arr).tobytes())


def write_ppm(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise FormatError("PPM output needs an (H, W, 3) uint8 array")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_netpbm(path) -> Tuple[bytes, int, int, int, bytes]:
    with _open_checked(path, "rb") as fh:
        raw = fh.read()
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    magic = tokens[0]
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit rasters are supported")
    return magic, w, h, maxval, raw[pos + 1 :]


def read_pgm(path) -> np.ndarray:
    magic, w, h, _, body = _read_netpbm(path)
    if magic != b"P5" or len(body) < w * h:
        raise FormatError(f"{path}: not a complete binary PGM")
    return np.frombuffer(body[: w * h], dtype=np.uint8).reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    magic, w, h, _, body = _read_netpbm(path)
    if magic != b"P6" or len(body) < 3 * w * h:
        raise FormatError(f"{path}: not a complete binary PPM")
    return np.frombuffer(body[: 3 * w * h], dtype=np.uint8).reshape(h, w, 3).copy()


# -- JSON / CSV records --------------------------------------------------------


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with _open_checked(path, "r") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def calib_to_dict(intr: FisheyeIntrinsics, extr: CameraExtrinsics) -> dict:
    d = {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy, "width": intr.width,
         "height": intr.height, "theta_max": intr.theta_max, "cam_pose": extr.to_dict()}
    for i, k in enumerate(intr.k, start=1):
        d[f"k{i}"] = k
    return d


def calib_from_dict(d: dict) -> Tuple[FisheyeIntrinsics, CameraExtrinsics]:
    try:
        intr = FisheyeIntrinsics(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            tuple(float(d[f"k{i}"]) for i in range(1, 5)),
            int(d["width"]), int(d["height"]), float(d.get("theta_max", FisheyeIntrinsics.__dataclass_fields__["theta_max"].default)),
        )
        extr = CameraExtrinsics(**{k: float(v) for k, v in d["cam_pose"].items()})
    except (KeyError, TypeError) as exc:
        raise FormatError(f"calibration record incomplete: {exc}") from exc
    return intr, extr


def write_odometry_csv(path, samples: Sequence[OdometrySample]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["ts_ms", "x_m", "y_m", "yaw_rad"])
        for s in samples:
            w.writerow([repr(float(s.timestamp)), repr(s.pose.x), repr(s.pose.y), repr(s.pose.yaw)])


def read_odometry_csv(path) -> List[OdometrySample]:
    out = []
    with _open_checked(path, "r") as fh:
        for rec in csv.DictReader(fh):
            try:
                out.append(OdometrySample(float(rec["ts_ms"]), Pose2D(float(rec["x_m"]), float(rec["y_m"]), float(rec["yaw_rad"]))))
            except (KeyError, ValueError, TypeError) as exc:
                raise FormatError(f"{path}: bad odometry row {rec}") from exc
    return out


def uls_frame_to_record(frame: UltrasonicFrame) -> dict:
    return {
        "ts_ms": frame.timestamp,
        "signalways": [
            {"tx": e.emitter_id, "rx": e.receiver_id, "spacing_m": e.sample_spacing, "amps": e.amplitudes.tolist()}
            for e in frame.envelopes
        ],
    }


def uls_frame_from_record(rec: dict) -> UltrasonicFrame:
    try:
        envs = tuple(EchoEnvelope(int(s["tx"]), int(s["rx"]), np.asarray(s["amps"], dtype=np.float64), float(s["spacing_m"]))
                     for s in rec["signalways"])
        return UltrasonicFrame(float(rec["ts_ms"]), envs)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad ultrasonic record: {exc}") from exc


def write_uls_jsonl(path, frames: Sequence[UltrasonicFrame]) -> None:
    with open(path, "w") as fh:
        for f in frames:
            fh.write(json.dumps(uls_frame_to_record(f), separators=(",", ":")))
            fh.write("\n")


def read_uls_jsonl(path) -> List[UltrasonicFrame]:
    out = []
    with _open_checked(path, "r") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{n}: invalid JSON") from exc
            out.append(uls_frame_from_record(rec))
    return out


# -- scenes --------------------------------------------------------------------


@dataclass
class SceneData:
    """Everything stored for one scene directory."""

    root: Path
    intrinsics: FisheyeIntrinsics
    extrinsics: CameraExtrinsics
    layout: SensorLayout
    odometry: List[OdometrySample]
    uls_frames: List[UltrasonicFrame]
    index: dict

    @property
    def scene_id(self) -> str:
        return self.index["scene_id"]

    @property
    def grid(self) -> GridSpec:
        return GridSpec.from_dict(self.index["grid"])

    @property
    def frames(self) -> List[dict]:
        return self.index["frames"]

    def image(self, k: int) -> np.ndarray:
        return read_pgm(self.root / self.frames[k]["image"])

    def gt_mask(self, k: int) -> np.ndarray:
        return read_pgm(self.root / self.frames[k]["gt"]) > 127


SCENE_FILES = ("calib.json", "layout.json", "odometry.csv", "uls.jsonl", "index.json")


def load_scene(path) -> SceneData:
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"scene directory {root} does not exist")
    for name in SCENE_FILES:
        if not (root / name).is_file():
            raise FormatError(f"scene {root} is missing {name}")
    intr, extr = calib_from_dict(read_json(root / "calib.json"))
    return SceneData(
        root, intr, extr,
        SensorLayout.from_dict(read_json(root / "layout.json")),
        read_odometry_csv(root / "odometry.csv"),
        read_uls_jsonl(root / "uls.jsonl"),
        read_json(root / "index.json"),
    )


def list_split(dataset_root, split: str) -> List[Path]:
    d = Path(dataset_root) / split
    if not d.is_dir():
        raise FormatError(f"dataset {dataset_root} has no '{split}' split")
    return sorted(p for p in d.iterdir() if p.is_dir())


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise FormatError(f"{p} is not writable")
    return p
