"""Command-line entry point: ``dynrecon {synth,preprocess,train,render,eval}``.

Exit codes: 0 on success, 2 on invalid input (arguments, config, dataset
layout), 1 on a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from scipy.spatial.transform import Rotation, Slerp

from . import config as configmod
from . import dataio, motionmask, synth
from .config import ConfigError
from .dataio import DatasetError, FormatError

log = logging.getLogger("dynrecon")


class UsageError(ValueError):
    """Invalid input detected after argument parsing."""


def interpolate_poses(a: np.ndarray, b: np.ndarray, n: int) -> np.ndarray:
    """``n`` camera-to-world poses from ``a`` to ``b``: slerp rotation, linear centre."""
    if n < 2:
        raise UsageError("pose interpolation needs at least 2 views")
    s = np.linspace(0.0, 1.0, n)
    rots = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([a[:3, :3], b[:3, :3]])))(s).as_matrix()
    out = np.tile(np.eye(4), (n, 1, 1))
    out[:, :3, :3] = rots
    out[:, :3, 3] = (1 - s)[:, None] * a[:3, 3] + s[:, None] * b[:3, 3]
    out[0], out[-1] = a, b
    return out


def render_requests(args, n_frames: int, times: list[float], poses: np.ndarray) -> list[tuple[str, np.ndarray, float]]:
    """(name, scene-frame pose, time) triples for the requested protocol."""
    if args.fix_view is not None:
        k = args.fix_view
        if not 0 <= k < n_frames:
            raise UsageError(f"--fix-view {k} outside [0, {n_frames - 1}]")
        ts = times if args.n_times is None else list(np.linspace(0.0, 1.0, args.n_times))
        return [(f"view{k:03d}_t{i:03d}", poses[k], float(t)) for i, t in enumerate(ts)]
    i, j = args.interpolate_poses
    for k in (i, j):
        if not 0 <= k < n_frames:
            raise UsageError(f"--interpolate-poses index {k} outside [0, {n_frames - 1}]")
    if not 0.0 <= args.fix_time <= 1.0:
        raise UsageError("--fix-time must lie in [0, 1]")
    path = interpolate_poses(poses[i], poses[j], args.n_views)
    return [(f"t{args.fix_time:.3f}_v{v:03d}", P, float(args.fix_time)) for v, P in enumerate(path)]


# --------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    try:
        spec = synth.load_spec(args.spec, seed=args.seed)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise UsageError(f"cannot read scene spec {args.spec!r}: {exc}") from exc
    if args.spec in synth.PRESET_NAMES:
        spec = synth.preset(args.spec, n_frames=args.frames, width=args.width, height=args.height, seed=args.seed)
    ds = synth.generate(spec)
    dataio.save_dataset(ds, args.out)
    (Path(args.out) / "scene.json").write_text(spec.to_json())
    log.info("wrote %d frames (%dx%d) to %s", ds.n_frames, ds.width, ds.height, args.out)
    return 0


def cmd_preprocess(args) -> int:
    ds = dataio.load_dataset(args.data, require_mask=False)
    out = Path(args.data) / "mask"
    out.mkdir(exist_ok=True)
    for i in range(ds.n_frames):
        flows = []
        if i + 1 < ds.n_frames:
            flows.append(ds.flow_fwd[i])
        if i > 0:
            flows.append(ds.flow_bwd[i - 1])
        inst = None if (ds.instance is None or args.no_instance) else ds.instance[i]
        m = motionmask.motion_mask(flows, inst, tau=args.tau, dilation=args.dilation, stride=args.stride,
                                   iters=args.iters, seed=args.seed + 1000 * i, ransac_threshold=args.ransac_threshold)
        dataio.write_mask(out / f"{i:05d}.png", m)
        log.info("frame %d: %.1f%% dynamic", i, 100 * m.mean())
    return 0


def _train_config(args) -> configmod.TrainConfig:
    base = configmod.load(args.config) if args.config else configmod.preset(args.preset)
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    if args.threads is not None:
        pairs["threads"] = str(args.threads)
    if args.seed is not None:
        pairs["seed"] = str(args.seed)
    if args.steps is not None:
        pairs["steps"] = str(args.steps)
    return configmod.parse_overrides(pairs, base)


def cmd_train(args) -> int:
    from .trainer import Trainer, TrainingError, evaluate

    cfg = _train_config(args)
    ds = dataio.load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    configmod.dump(cfg, out / "config.cfg")
    try:
        tr = Trainer(cfg, ds, out)
    except TrainingError as exc:
        raise UsageError(str(exc)) from exc
    tr.train()
    if ds.gt_poses is not None or ds.gt_focal is not None:
        frames = tr.heldout_frames if len(tr.heldout_frames) else None
        summary = evaluate(tr.scene, ds, frames)
        summary.pop("frames")
        (out / "eval.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
        log.info("evaluation: %s", json.dumps(summary, sort_keys=True))
    return 0


def _load(path):
    from .trainer import TrainingError, load_scene

    try:
        return load_scene(path)
    except (TrainingError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def cmd_render(args) -> int:
    scene, meta = _load(args.checkpoint)
    poses = scene.cameras.c2w().detach()
    reqs = render_requests(args, meta["n_frames"], meta["times"], poses.double().numpy())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for name, P, t in reqs:
        res = scene.render_image(torch.as_tensor(P, dtype=poses.dtype), t)
        dataio.write_image(out / f"{name}.png", np.clip(res["rgb"], 0, 1))
        if args.depth:
            dataio.write_disparity(out / f"{name}_depth.pfm", res["depth"].astype(np.float32))
        if "mask" in res and args.mask:
            dataio.write_mask(out / f"{name}_mask.png", res["mask"] > 0.5)
        index.append({"name": name, "time": t, "c2w": scene.to_world_frame(P).tolist()})
    (out / "renders.json").write_text(json.dumps(index, indent=1))
    log.info("rendered %d images to %s", len(reqs), out)
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate

    scene, meta = _load(args.checkpoint)
    ds = dataio.load_dataset(args.data)
    if ds.n_frames != meta["n_frames"] or (ds.height, ds.width) != (meta["height"], meta["width"]):
        raise UsageError("dataset does not match the checkpoint (frame count or resolution)")
    held = meta.get("heldout_frames") or []
    frames = {"all": None, "train": meta.get("train_frames"), "heldout": held or None}[args.frames]
    res = evaluate(scene, ds, frames)
    res["frames"] = {str(k): v for k, v in res["frames"].items()}
    text = json.dumps(res, indent=1, sort_keys=True)
    if args.json:
        Path(args.json).write_text(text)
    print(text)
    return 0


# ------------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynrecon", description="Joint camera and static/dynamic radiance field "
                                "reconstruction from a monocular video with flow, disparity and mask priors.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    s.add_argument("--spec", required=True,
                   help=f"preset name ({', '.join(synth.PRESET_NAMES)}) or path to a scene JSON file")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, default=0, help="texture and prior seed (default 0)")
    s.add_argument("--frames", type=int, default=30, help="frame count for presets (default 30)")
    s.add_argument("--width", type=int, default=96, help="image width for presets (default 96)")
    s.add_argument("--height", type=int, default=72, help="image height for presets (default 72)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="compute motion masks from flow (and instance masks) into mask/")
    s.add_argument("--data", required=True, help="dataset directory; mask/ is overwritten")
    s.add_argument("--tau", type=float, default=1.0, help="Sampson threshold after diagonal normalization (default 1.0)")
    s.add_argument("--dilation", type=int, default=3, help="disk dilation radius in pixels (default 3)")
    s.add_argument("--stride", type=int, default=4, help="RANSAC correspondence grid stride (default 4)")
    s.add_argument("--iters", type=int, default=500, help="RANSAC iterations (default 500)")
    s.add_argument("--ransac-threshold", type=float, default=motionmask.MASK_RANSAC_THRESHOLD,
                   help=f"RANSAC inlier Sampson distance in pixels (default {motionmask.MASK_RANSAC_THRESHOLD})")
    s.add_argument("--seed", type=int, default=0, help="RANSAC seed (default 0)")
    s.add_argument("--no-instance", action="store_true", help="ignore instance/ masks even if present")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="optimize cameras and fields; writes checkpoints and metrics.jsonl")
    g = s.add_mutually_exclusive_group()
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--preset", default="default", help=f"named config preset ({', '.join(configmod.PRESETS)})")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="run directory for config.cfg, metrics.jsonl and checkpoints")
    s.add_argument("--threads", type=int, help="torch thread count; 1 gives bitwise-reproducible runs")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--steps", type=int, help="override the step count")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (repeatable)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render novel views or times from a checkpoint")
    s.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    s.add_argument("--out", required=True, help="output directory for PNGs and renders.json")
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--fix-view", type=int, metavar="K", help="keep camera K fixed (use with --sweep-time)")
    g.add_argument("--fix-time", type=float, metavar="T", help="keep normalized time T fixed (use with --interpolate-poses)")
    s.add_argument("--sweep-time", action="store_true", help="vary time over the sequence at the fixed view")
    s.add_argument("--n-times", type=int, help="evenly spaced times for --sweep-time (default: the training times)")
    s.add_argument("--interpolate-poses", type=int, nargs=2, metavar=("I", "J"),
                   help="move from camera I to camera J at the fixed time")
    s.add_argument("--n-views", type=int, default=10, help="views along the interpolated path (default 10)")
    s.add_argument("--depth", action="store_true", help="also write expected-depth PFMs")
    s.add_argument("--mask", action="store_true", help="also write nonrigidity masks")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM/mask IoU and ATE/RPE/focal of a checkpoint against ground truth")
    s.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    s.add_argument("--data", required=True, help="dataset directory with gt/")
    s.add_argument("--frames", choices=("heldout", "train", "all"), default="heldout",
                   help="frames for image metrics (default heldout; falls back to all)")
    s.add_argument("--json", help="also write the result to this file")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "render":
        if args.fix_view is not None and not args.sweep_time:
            parser.error("--fix-view requires --sweep-time")
        if args.fix_time is not None and args.interpolate_poses is None:
            parser.error("--fix-time requires --interpolate-poses I J")
    if args.command == "train" and not args.verbose:
        logging.getLogger("dynrecon.trainer").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetError, FormatError, FileNotFoundError) as exc:
        print(f"dynrecon {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.exception("runtime failure")
        print(f"dynrecon {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
