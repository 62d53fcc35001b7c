"""Joint optimization of cameras, static field and dynamic field."""

from __future__ import annotations

import functools
import json
import logging
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import geometry
from .config import TrainConfig
from .dataio import Dataset
from .diffcore import Adam, Parameter, backward
from .losses import (disparity_loss, format_breakdown, mask_loss, monodepth_loss, photometric,
                     photometric_static, reprojection_loss, scene_flow_reg, surface_point, total_loss)
from .model import DTYPES, Scene
from .rendering import distortion_loss, render_ray
from .tensorfield import resample_grid

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule

def resolution_levels(init: int, final: int, n_milestones: int) -> list[int]:
    """Geometric progression of cell counts from ``init`` to ``final``."""
    if n_milestones == 0:
        return [final]
    return [int(round(init * (final / init) ** (k / n_milestones))) for k in range(n_milestones + 1)]


def schedule_resolution(step: int, cfg: TrainConfig):
    """(static, dynamic) resolution triples in effect at ``step``."""
    k = sum(1 for s in cfg.upsample_steps if step >= s)
    n = len(cfg.upsample_steps)
    rs = resolution_levels(cfg.static_res_init, cfg.static_res_final, n)[k if n else 0]
    rd = resolution_levels(cfg.dynamic_res_init, cfg.dynamic_res_final, n)[k if n else 0]
    return (rs,) * 3, (rd,) * 3


def warmup_steps(cfg: TrainConfig) -> int:
    return int(math.ceil(cfg.static_warmup_frac * cfg.steps))


def pose_lr_factor(step: int, cfg: TrainConfig) -> float:
    """Linear ramp over ``pose_warmup_frac`` of the run, then cosine decay to ``pose_lr_final_frac``."""
    frac = cfg.pose_lr_final_frac
    ramp = cfg.pose_warmup_frac * cfg.steps
    if step < ramp:
        return step / ramp
    return frac + (1 - frac) * 0.5 * (1 + math.cos(math.pi * min(step, cfg.steps) / max(cfg.steps, 1)))


def field_lr_factor(step: int, cfg: TrainConfig) -> float:
    return cfg.lr_final_frac ** (min(step, cfg.steps) / max(cfg.steps, 1))


# ---------------------------------------------------------------------------
# ray batches

@dataclass
class RayBatch:
    frames: torch.Tensor  # (B,) long
    rows: torch.Tensor  # (B,) long
    cols: torch.Tensor  # (B,) long
    pixels: torch.Tensor  # (B, 2) continuous (x, y) pixel centres

    def __len__(self):
        return len(self.frames)


def sample_rays(dataset: Dataset, batch_size: int, rng: np.random.Generator, static_fraction: float = 0.5,
                frames: np.ndarray | None = None, dtype=torch.float32, dynamic_fraction: float = 0.0) -> RayBatch:
    """Uniform (frame, pixel) draws with at least ``static_fraction`` static and
    ``dynamic_fraction`` masked pixels when available."""
    n, h, w = dataset.mask.shape
    frames = np.arange(n) if frames is None else np.asarray(frames)
    mask = dataset.mask[frames].reshape(-1)
    n_static = int(math.ceil(static_fraction * batch_size))
    static_idx = np.flatnonzero(~mask)
    if len(static_idx) == 0:
        n_static = 0
    n_dynamic = min(int(math.ceil(dynamic_fraction * batch_size)), batch_size - n_static)
    dynamic_idx = np.flatnonzero(mask) if n_dynamic > 0 else static_idx[:0]
    if len(dynamic_idx) == 0:
        n_dynamic = 0
    picks = []
    if n_static:
        picks.append(static_idx[rng.integers(0, len(static_idx), n_static)])
    if n_dynamic:
        picks.append(dynamic_idx[rng.integers(0, len(dynamic_idx), n_dynamic)])
    picks.append(rng.integers(0, mask.size, batch_size - n_static - n_dynamic))
    flat = np.concatenate(picks)
    f, rem = np.divmod(flat, h * w)
    r, c = np.divmod(rem, w)
    f = frames[f]
    px = np.stack([c + 0.5, r + 0.5], -1)
    return RayBatch(torch.as_tensor(f), torch.as_tensor(r), torch.as_tensor(c), torch.as_tensor(px, dtype=dtype))


def sever_pose_gradients(*tensors: torch.Tensor):
    """Same values, no derivative path back to the cameras."""
    out = tuple(t.detach() for t in tensors)
    return out if len(out) > 1 else out[0]


# ---------------------------------------------------------------------------
# checkpoints: a small deterministic container
#   magic(8) | header length (u64 LE) | JSON header | raw little-endian arrays

MAGIC = b"DYNRCKPT"
CKPT_VERSION = 1
_DT = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}


def save_checkpoint(path, state: dict[str, torch.Tensor], meta: dict) -> None:
    names = sorted(state)
    entries, blobs, offset = [], [], 0
    for name in names:
        t = state[name].detach().cpu().contiguous()
        arr = t.numpy().astype(_DT[t.dtype], copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": _DT[t.dtype], "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"version": CKPT_VERSION, "tensors": entries, "meta": meta}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<Q", len(header)) + header)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise TrainingError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    if header.get("version") != CKPT_VERSION:
        raise TrainingError(f"{path}: unsupported checkpoint version {header.get('version')}")
    base = 16 + hlen
    state = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise TrainingError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr)
    return state, header["meta"]


def load_scene(path) -> tuple[Scene, dict]:
    state, meta = read_checkpoint(path)
    cfg = TrainConfig(**meta["config"])
    scene = Scene(cfg, meta["n_frames"], meta["width"], meta["height"],
                  static_res=meta["resolution"]["static"], dynamic_res=meta["resolution"].get("dynamic"))
    dtype = DTYPES[cfg.dtype]
    scene.load_state_dict({k: v.to(dtype) if v.is_floating_point() else v for k, v in state.items()})
    return scene, meta


# ---------------------------------------------------------------------------

def split_frames(n_frames: int, holdout_every: int):
    """(train, held-out) frame indices; every ``holdout_every``-th frame (offset k-1) is held out."""
    idx = np.arange(n_frames)
    if holdout_every <= 1:
        return idx, idx[:0]
    held = (idx % holdout_every) == holdout_every - 1
    return idx[~held], idx[held]


class Trainer:
    def __init__(self, cfg: TrainConfig, dataset: Dataset, out_dir: str | Path | None = None):
        problems = dataset.validate()
        if problems:
            raise TrainingError("; ".join(problems))
        if cfg.use_gt_poses and dataset.gt_poses is None:
            raise TrainingError("use_gt_poses set but the dataset has no gt/poses.txt")
        if cfg.use_gt_focal and dataset.gt_focal is None:
            raise TrainingError("use_gt_focal set but the dataset has no gt/intrinsics.txt")
        self.cfg = cfg
        self.data = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        torch.set_num_threads(max(1, cfg.threads))
        torch.manual_seed(cfg.seed)
        self.dtype = DTYPES[cfg.dtype]
        rs, rd = schedule_resolution(0, cfg)
        self.scene = Scene(cfg, dataset.n_frames, dataset.width, dataset.height, dataset.gt_poses, dataset.gt_focal,
                           static_res=rs[0], dynamic_res=rd[0])
        self.train_frames, self.heldout_frames = split_frames(dataset.n_frames, cfg.holdout_every)
        self._is_train = np.zeros(dataset.n_frames, bool)
        self._is_train[self.train_frames] = True
        self.images = torch.as_tensor(dataset.frames, dtype=self.dtype)
        self.mask = torch.as_tensor(dataset.mask)
        self.disp = torch.as_tensor(dataset.disparity, dtype=self.dtype)
        self.flow_fwd = torch.as_tensor(np.stack(dataset.flow_fwd), dtype=self.dtype)
        self.flow_bwd = torch.as_tensor(np.stack(dataset.flow_bwd), dtype=self.dtype)
        self.times = torch.as_tensor(dataset.times, dtype=self.dtype)
        self.rng = np.random.default_rng(cfg.seed)
        self.gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.weights = cfg.loss_weights()
        self.step = 0
        self.lr_scale = 1.0
        self.retries = 0
        self.history: list[dict] = []
        self._build_optimizer()
        self._snapshot = self._take_snapshot()

    # -------------------------------------------------------------- optimizer
    def _group(self, tag: str) -> str:
        if tag == "cameras.log_focal":
            return "focal"
        if tag.startswith("cameras."):
            return "pose"
        if "_plane" in tag or "_line" in tag:
            return "field"
        return "net"

    def _base_lr(self, group: str) -> float:
        cfg = self.cfg
        return {"pose": cfg.lr_pose, "focal": cfg.lr_focal or cfg.lr_pose, "field": cfg.lr_field,
                "net": cfg.lr_net}[group]

    def _build_optimizer(self):
        self.opt = Adam([])
        for name, p in self.scene.named_parameters():
            if not p.requires_grad:
                continue
            g = self._group(name)
            self.opt.add([Parameter(p, name)], self._base_lr(g), self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
        self._set_lrs(0)

    def _set_lrs(self, step: int):
        fp, ff = pose_lr_factor(step, self.cfg), field_lr_factor(step, self.cfg)
        for tag, st in self.opt.states.items():
            g = self._group(tag)
            st.lr = self._base_lr(g) * (fp if g in ("pose", "focal") else ff) * self.lr_scale

    def _refresh_field_params(self):
        current = dict(self.scene.named_parameters())
        for p in list(self.opt.params):
            new = current.get(p.tag)
            if new is not None and new is not p.values:
                remap = functools.partial(resample_grid, size=tuple(new.shape[-2:]))
                self.opt.replace(p.tag, Parameter(new, p.tag), remap=remap)

    def _maybe_upsample(self):
        rs, rd = schedule_resolution(self.step, self.cfg)
        changed = False
        if self.scene.static_field.resolution != rs:
            self.scene.static_field.upsample(rs)
            changed = True
        if self.scene.dynamic is not None and self.scene.dynamic.field.resolution != rd:
            self.scene.dynamic.field.upsample(rd)
            changed = True
        if changed:
            self._refresh_field_params()
            log.info("step=%d upsample static=%s dynamic=%s", self.step, rs, rd)
            self._snapshot = self._take_snapshot()

    # ---------------------------------------------------------------- rollback
    def _take_snapshot(self):
        return {
            "step": self.step,
            "scene": {k: v.detach().clone() for k, v in self.scene.state_dict().items()},
            "opt": {t: (s.m.clone(), s.v.clone(), s.t) for t, s in self.opt.states.items()},
            "rng": self.rng.bit_generator.state,
            "gen": self.gen.get_state(),
        }

    def _restore(self, snap):
        self.step = snap["step"]
        self.scene.load_state_dict(snap["scene"])
        for t, (m, v, k) in snap["opt"].items():
            st = self.opt.states[t]
            st.m, st.v, st.t = m.clone(), v.clone(), k
        self.rng.bit_generator.state = snap["rng"]
        self.gen.set_state(snap["gen"])

    # ------------------------------------------------------------------ losses
    def _neighbours(self, frames: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """A random adjacent training frame for each entry; ok=False if none exists."""
        n = self.data.n_frames
        direction = np.where(self.rng.random(len(frames)) < 0.5, -1, 1)
        out = frames + direction
        ok = np.zeros(len(frames), bool)
        for k in range(len(frames)):
            for j in (frames[k] + direction[k], frames[k] - direction[k]):
                if 0 <= j < n and self._is_train[j]:
                    out[k], ok[k] = j, True
                    break
        return out, ok

    def _flow_targets(self, frames, rows, cols, nbr):
        fwd = nbr > frames
        flow = torch.empty(len(frames), 2, dtype=self.dtype)
        if fwd.any():
            flow[fwd] = self.flow_fwd[frames[fwd], rows[fwd], cols[fwd]]
        if (~fwd).any():
            flow[~fwd] = self.flow_bwd[frames[~fwd] - 1, rows[~fwd], cols[~fwd]]
        return flow

    def _in_image(self, px: torch.Tensor) -> torch.Tensor:
        W, H = self.data.width, self.data.height
        return (px[:, 0] >= 0) & (px[:, 0] <= W) & (px[:, 1] >= 0) & (px[:, 1] <= H)

    def compute_terms(self, batch: RayBatch, step: int, dynamic: bool | None = None) -> tuple[dict, dict]:
        cfg, scene = self.cfg, self.scene
        cam = scene.cameras
        f, r, c = batch.frames, batch.rows, batch.cols
        target = self.images[f, r, c]
        M = self.mask[f, r, c]
        prior = self.disp[f, r, c]
        static = ~M
        terms: dict[str, torch.Tensor] = {}
        aux: dict = {}

        # static branch, with gradients to the cameras
        o, d = scene.rays(f, batch.pixels)
        samples = scene.sample(o, d, stratified=True, generator=self.gen)
        out_s, sig_s, col_s = scene.render_static(samples)
        terms["photo_s"] = photometric_static(out_s.color, target, M.to(self.dtype))

        c2w_i = cam.c2w(f)
        focal = cam.focal()
        X, ok = surface_point(out_s.weights, samples.world_pts)
        z = -geometry.world_to_camera(X, c2w_i)[..., 2]
        valid = ok & static & (z > 1e-4)
        terms["monodepth_s"] = monodepth_loss(1 / z.clamp_min(1e-4), prior, valid, f, nonneg_scale=True)[0]

        # correspondence rays on a subset of the batch
        n_aux = int(round(cfg.aux_fraction * len(batch)))
        fa = f[:n_aux].numpy()
        nbr, has = self._neighbours(fa)
        sel = torch.as_tensor(np.flatnonzero(has))
        j = torch.as_tensor(nbr[has])
        fi, ri, ci = f[sel], r[sel], c[sel]
        tgt_px = batch.pixels[sel] + self._flow_targets(fi, ri, ci, j)
        inb = self._in_image(tgt_px)
        c2w_j = cam.c2w(j)
        ok_i = ok[sel] & static[sel] & inb
        terms["reproj_s"], aux["behind_s"] = reprojection_loss(X[sel], tgt_px, c2w_j, focal, cam.cx, cam.cy, ok_i)
        oj, dj = scene.rays(j, tgt_px)
        samp_j = scene.sample(oj, dj, stratified=True, generator=self.gen)
        out_j, _, _ = scene.render_static(samp_j, with_color=False)
        Xj, okj = surface_point(out_j.weights, samp_j.world_pts)
        terms["disp_s"] = disparity_loss(X[sel], Xj, c2w_j, ok_i & okj)

        weights_for_distortion = out_s.weights
        dynamic = scene.dynamic is not None and step >= warmup_steps(cfg) if dynamic is None else dynamic
        if dynamic:
            t = self.times[f]
            od, dd = sever_pose_gradients(o, d)
            samp_d = scene.sample(od, dd, stratified=False, params=samples.params)
            col_d, sig_d, m = scene.dynamic_eval(samp_d, t)
            out_d = render_ray(sig_d, col_d, samp_d.delta, samp_d.params, scene.background)
            comp = scene.composite(sig_s, col_s, sig_d, col_d, m, samples, samp_d)
            terms["photo"] = photometric(comp.color, target)
            terms["photo_d"] = photometric(out_d.color, target)
            terms["mask_d"] = mask_loss(comp.nonrigidity, M.to(self.dtype))
            weights_for_distortion = comp.weights

            c2w_i_d = sever_pose_gradients(c2w_i)
            Xd, okd = surface_point(out_d.weights, samp_d.world_pts)
            zd = -geometry.world_to_camera(Xd, c2w_i_d)[..., 2]
            vd = okd & (zd > 1e-4)
            terms["monodepth_d"] = monodepth_loss(1 / zd.clamp_min(1e-4), prior, vd, f, nonneg_scale=True)[0]

            pd, _ = surface_point(out_d.weights[sel], samp_d.field_pts[sel])
            s_fwd, s_bwd = scene.scene_flow(pd, t[sel])
            flow3d = torch.where((j > fi)[:, None], s_fwd, s_bwd)
            terms["sf_reg"] = scene_flow_reg(s_fwd, s_bwd)
            c2w_j_d, focal_d = sever_pose_gradients(c2w_j, focal)
            okd_i = okd[sel] & inb
            terms["reproj_d"], aux["behind_d"] = reprojection_loss(Xd[sel], tgt_px, c2w_j_d, focal_d, cam.cx, cam.cy,
                                                                   okd_i, scene_flow=flow3d)
            ojd, djd = sever_pose_gradients(oj, dj)
            samp_jd = scene.sample(ojd, djd, stratified=False, params=samp_j.params)
            sig_jd = scene.dynamic_density(samp_jd, self.times[j])
            w_jd = render_ray(sig_jd, torch.zeros(sig_jd.shape + (3,), dtype=self.dtype), samp_jd.delta).weights
            Xjd, okjd = surface_point(w_jd, samp_jd.world_pts)
            terms["disp_d"] = disparity_loss(Xd[sel] + flow3d, Xjd, c2w_j_d, okd_i & okjd)

        terms["distortion"] = distortion_loss(weights_for_distortion, samples.s_norm, samples.s_delta).mean()
        return terms, aux

    # -------------------------------------------------------------------- loop
    def train_step(self) -> dict:
        self._maybe_upsample()
        self._set_lrs(self.step)
        batch = sample_rays(self.data, self.cfg.batch_size, self.rng, self.cfg.static_fraction,
                            self.train_frames, self.dtype, self.cfg.dynamic_fraction)
        terms, aux = self.compute_terms(batch, self.step)
        total, breakdown = total_loss(terms, self.weights, self.step)
        self.opt.zero_grad()
        if not math.isfinite(breakdown["total"]):
            raise FloatingPointError(f"non-finite loss at step {self.step}")
        backward(total)
        skipped = self.opt.step()
        if skipped:
            raise FloatingPointError(f"non-finite gradient at step {self.step} in {skipped[:3]}")
        self.scene.cameras.wrap()
        breakdown["step"] = self.step
        breakdown.update({k: v for k, v in aux.items()})
        self.step += 1
        return breakdown

    def train(self, steps: int | None = None, callback=None) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        metrics_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_fh = open(self.out_dir / "metrics.jsonl", "a")
        t0 = time.perf_counter()
        try:
            while self.step < steps:
                try:
                    rec = self.train_step()
                except FloatingPointError as exc:
                    self._rollback(exc)
                    continue
                rec["elapsed_s"] = round(time.perf_counter() - t0, 3)
                self.history.append(rec)
                if self.cfg.log_every and (rec["step"] % self.cfg.log_every == 0 or self.step == steps):
                    log.info(format_breakdown(rec["step"], {k: v for k, v in rec.items() if k != "step"}))
                    if metrics_fh is not None:
                        metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if self.cfg.ckpt_every and self.step % self.cfg.ckpt_every == 0:
                    self._snapshot = self._take_snapshot()
                    if self.out_dir is not None:
                        self.save(self.out_dir / f"ckpt_{self.step:06d}.bin")
                if callback is not None:
                    callback(self, rec)
        finally:
            if metrics_fh is not None:
                metrics_fh.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "final.bin")
        return self.history

    def _rollback(self, exc: Exception):
        self.retries += 1
        if self.retries > self.cfg.max_nan_retries:
            raise TrainingError(f"{exc}; gave up after {self.cfg.max_nan_retries} rollbacks "
                                f"(last good step {self._snapshot['step']}, lr scale {self.lr_scale:g})") from exc
        self.lr_scale *= 0.5
        log.warning("%s: rolling back to step %d with lr scale %g", exc, self._snapshot["step"], self.lr_scale)
        self._restore(self._snapshot)

    # ---------------------------------------------------------------- outputs
    def meta(self) -> dict:
        return {
            "step": self.step,
            "n_frames": self.data.n_frames,
            "width": self.data.width,
            "height": self.data.height,
            "times": [float(t) for t in self.data.times],
            "resolution": self.scene.resolutions(),
            "config": self.cfg.to_dict(),
            "config_hash": self.cfg.hash(),
            "train_frames": [int(i) for i in self.train_frames],
            "heldout_frames": [int(i) for i in self.heldout_frames],
        }

    def save(self, path) -> None:
        save_checkpoint(path, self.scene.state_dict(), self.meta())


# ---------------------------------------------------------------------------
# evaluation

def evaluate(scene: Scene, dataset: Dataset, frames=None) -> dict:
    """Image, mask and camera metrics for a trained scene against a dataset with ground truth."""
    from . import metrics
    from .motionmask import iou

    frames = range(dataset.n_frames) if frames is None else frames
    out: dict = {"frames": {}}
    psnrs, ssims, ious = [], [], []
    for i in frames:
        i = int(i)
        c2w = scene.cameras.c2w(torch.tensor([i]))[0].detach()
        res = scene.render_image(c2w, float(dataset.times[i]))
        rec = {"psnr": metrics.psnr(res["rgb"], dataset.frames[i]), "ssim": metrics.ssim(res["rgb"], dataset.frames[i])}
        if "mask" in res:
            ref = dataset.gt_mask[i] if dataset.gt_mask is not None else dataset.mask[i]
            rec["mask_iou"] = iou(res["mask"] > 0.5, ref)
            ious.append(rec["mask_iou"])
        psnrs.append(rec["psnr"])
        ssims.append(rec["ssim"])
        out["frames"][i] = rec
    out["psnr"] = float(np.mean(psnrs)) if psnrs else float("nan")
    out["ssim"] = float(np.mean(ssims)) if ssims else float("nan")
    if ious:
        out["mask_iou"] = float(np.mean(ious))
    if dataset.gt_poses is not None and dataset.n_frames >= 3:
        est = scene.cameras.poses_numpy()
        tm = metrics.trajectory_metrics(est, dataset.gt_poses)
        extent = metrics.trajectory_extent(dataset.gt_poses)
        out.update(ate=tm.ate, rpe_trans=tm.rpe_trans, rpe_rot=tm.rpe_rot, extent=extent,
                   ate_frac=tm.ate / extent if extent > 0 else float("nan"))
    if dataset.gt_focal is not None:
        fhat = float(scene.cameras.focal().detach())
        out.update(focal=fhat, focal_rel_err=abs(fhat - dataset.gt_focal) / dataset.gt_focal)
    return out
