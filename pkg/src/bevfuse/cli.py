"""``bevfuse`` command line: simulate, map-uls, train, eval, render."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import metrics
from .config import RunConfig, load_config
from .errors import BevFuseError, ConfigError, FormatError
from .io import ensure_dir, list_split, load_scene, read_pgm, write_json, write_pgm, write_ppm
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .nn.model import MODES
from .runtime import parallel_map, single_threaded_blas, thread_count
from .sim import SPLITS, generate_dataset
from .train import (build_network, epoch_means, evaluate, is_mirror_symmetric, load_samples, predict, train,
                    uls_grid_for_frame, write_loss_csv)

CHECKPOINT_NAME = "model.bvf"
LOSS_NAME = "loss.csv"
RUN_NAME = "run.json"


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- commands ---------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, seed: int, out: Optional[str] = None) -> dict:
    root = Path(out or cfg.dataset_root)
    manifest = generate_dataset(cfg.sim, seed, root, thread_count())
    counts = {s: len(v) for s, v in manifest["splits"].items()}
    _say(f"scenes {sum(counts.values())} (train {counts['train']}, val {counts['val']}, test {counts['test']}); "
         f"camera frames {manifest['frames']}; ultrasonic frames {manifest['uls_frames']}")
    return manifest


def normalize_to_u8(grid: np.ndarray) -> np.ndarray:
    """Min/max of the grid map to 0/255; a constant grid maps to 0."""
    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    if hi <= lo:
        return np.zeros(g.shape, dtype=np.uint8)
    return np.round(255.0 * (g - lo) / (hi - lo)).astype(np.uint8)


def cmd_map_uls(scene_dir, out) -> List[Path]:
    """Compensated amplitude grid per camera frame: ``NNNNNN.npy`` (exact) and ``NNNNNN.pgm``."""
    scene = load_scene(scene_dir)
    out = ensure_dir(out)

    def one(k: int) -> Path:
        with single_threaded_blas():
            g = uls_grid_for_frame(scene, k).data[..., 0]
        idx = scene.frames[k]["index"]
        np.save(out / f"{idx:06d}.npy", g)
        write_pgm(out / f"{idx:06d}.pgm", normalize_to_u8(g))
        return out / f"{idx:06d}.npy"

    written = parallel_map(one, range(len(scene.frames)), thread_count())
    _say(f"mapped {len(written)} frames of scene {scene.scene_id} into {out}")
    return written


def _first_scene(cfg: RunConfig, split: str):
    scenes = list_split(cfg.dataset_root, split)
    if not scenes:
        raise FormatError(f"split '{split}' of {cfg.dataset_root} holds no scenes")
    return load_scene(scenes[0])


def cmd_train(cfg: RunConfig, mode: str, out: Optional[str] = None) -> Path:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not Path(cfg.dataset_root).is_dir():
        raise ConfigError(f"dataset root {cfg.dataset_root} does not exist")
    out_dir = ensure_dir(out or Path(cfg.output_root) / mode)
    scene = _first_scene(cfg, "train")
    if cfg.trainer.hflip and not is_mirror_symmetric(scene):
        raise ConfigError("mirror augmentation needs a left-right symmetric camera and sensor rig")
    samples = load_samples(cfg.dataset_root, "train", cfg.trainer.frames_per_scene, thread_count())
    net = build_network(cfg.network, scene, mode, cfg.trainer.seed)
    log = train(net, samples, cfg.trainer, on_epoch=lambda e, l: _say(f"epoch {e + 1}/{cfg.trainer.epochs} loss {l:.6f}"))
    save_checkpoint(out_dir / CHECKPOINT_NAME, net.state_dict())
    write_loss_csv(out_dir / LOSS_NAME, log)
    write_json(out_dir / RUN_NAME, {"mode": mode, "samples": len(samples), "config": cfg.to_dict()})
    means = epoch_means(log)
    if means:
        _say(f"trained {mode} on {len(samples)} frames: loss {means[0]:.6f} -> {means[-1]:.6f}")
    return out_dir / CHECKPOINT_NAME


def cmd_eval(cfg: RunConfig, checkpoint, mode: str, split: str, out) -> List[metrics.MetricsReport]:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    if not Path(checkpoint).is_file():
        raise FormatError(f"checkpoint {checkpoint} does not exist")
    scene = _first_scene(cfg, split)
    net = build_network(cfg.network, scene, mode, cfg.trainer.seed)
    net.load_state_dict(load_checkpoint(checkpoint))
    samples = load_samples(cfg.dataset_root, split, None, thread_count())
    pred = predict(net, samples, cfg.trainer.batch_size)
    gt = np.stack([s.gt for s in samples])
    labels = [f"{s.scene_id}:{s.frame:06d}" for s in samples]
    rows = evaluate(pred, gt, scene.grid, labels, camera_range=cfg.eval.camera_range, by_range=cfg.eval.by_range)
    ensure_dir(Path(out).parent)
    metrics.write_report_csv(out, rows)
    agg = next(r for r in rows if r.label == "aggregate")
    _say(f"{split}: {len(samples)} frames, iou {agg.iou:.4f} dice {agg.dice:.4f} E {agg.euclidean_E:.4f}")
    return rows


RENDER_KINDS = ("grid", "mask", "overlay")


def _load_raster(path) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"input {p} does not exist")
    if p.suffix == ".npy":
        arr = np.load(p, allow_pickle=False)
        return arr[..., 0] if arr.ndim == 3 and arr.shape[2] == 1 else arr
    if p.suffix == ".pgm":
        return read_pgm(p).astype(np.float64)
    raise FormatError(f"unsupported input type {p.suffix or p.name!r}; expected .npy or .pgm")


def render_overlay(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """RGB image: red = prediction, green = ground truth, yellow = both."""
    if pred.shape != gt.shape:
        raise FormatError(f"overlay inputs differ in shape: {pred.shape} vs {gt.shape}")
    img = np.zeros(pred.shape + (3,), dtype=np.uint8)
    img[..., 0] = np.where(pred > 0, 255, 0)
    img[..., 1] = np.where(gt > 0, 255, 0)
    return img


def cmd_render(kind: str, inp, out, gt=None) -> Path:
    if kind not in RENDER_KINDS:
        raise FormatError(f"unknown render input type {kind!r}; expected one of {RENDER_KINDS}")
    data = _load_raster(inp)
    if data.ndim != 2:
        raise FormatError(f"render expects a 2-D raster, got shape {data.shape}")
    out = Path(out)
    ensure_dir(out.parent)
    if kind == "grid":
        write_pgm(out, normalize_to_u8(data))
    elif kind == "mask":
        write_pgm(out, np.where(data > 0, 255, 0).astype(np.uint8))
    else:
        if gt is None:
            raise FormatError("overlay rendering needs --gt")
        write_ppm(out, render_overlay(data, _load_raster(gt)))
    _say(f"wrote {out}")
    return out


# -- argument parsing ---------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bevfuse", description="Fisheye + ultrasonic BEV occupancy toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON run configuration")
        if seed:
            sp.add_argument("--seed", type=int, help="random seed")

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    common(s)
    s.add_argument("--scenes", type=int, help="number of scenes")
    s.add_argument("--out", help="dataset root (default: config dataset_root)")

    m = sub.add_parser("map-uls", help="ultrasonic grids per camera frame of one scene")
    common(m, seed=False)
    m.add_argument("--scene", required=True, help="scene directory")
    m.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--mode", choices=MODES, default="multimodal")
    t.add_argument("--dataset", help="dataset root")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", help="run directory (default: <output_root>/<mode>)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=MODES, default="multimodal")
    e.add_argument("--split", choices=SPLITS, default="val")
    e.add_argument("--dataset", help="dataset root")
    e.add_argument("--by-range", action="store_true", help="add range-band rows")
    e.add_argument("--out", required=True, help="report CSV path")

    r = sub.add_parser("render", help="render grids, masks or overlays")
    r.add_argument("--kind", choices=RENDER_KINDS, required=True)
    r.add_argument("--input", required=True, help=".npy or .pgm raster (prediction for overlays)")
    r.add_argument("--gt", help="ground-truth raster for overlays")
    r.add_argument("--out", required=True)
    return p


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["trainer.seed"] = args.seed
    if getattr(args, "scenes", None) is not None:
        overrides["sim.n_scenes"] = args.scenes
    if getattr(args, "epochs", None) is not None:
        overrides["trainer.epochs"] = args.epochs
    if getattr(args, "dataset", None) is not None:
        overrides["dataset_root"] = args.dataset
    if getattr(args, "by_range", False):
        overrides["eval.by_range"] = True
    cfg = load_config(args.config, overrides)
    if getattr(args, "scenes", None) is not None:
        cfg.sim.split_counts = None
    return cfg


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "render":
            cmd_render(args.kind, args.input, args.out, args.gt)
            return 0
        thread_count()
        if args.command == "map-uls":
            cmd_map_uls(args.scene, args.out)
            return 0
        cfg = _config(args)
        if args.command == "simulate":
            cmd_simulate(cfg, cfg.trainer.seed, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.mode, args.out)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint, args.mode, args.split, args.out)
        return 0
    except BevFuseError as exc:
        print(f"ERROR {exc.domain}: {exc}", file=sys.stderr, flush=True)
        return 1
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr, flush=True)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
