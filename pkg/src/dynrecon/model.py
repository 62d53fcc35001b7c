"""The jointly optimized scene: camera parameters, static and dynamic fields."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import geometry
from .config import TrainConfig
from .rendering import RenderOutput, composite_render, intervals, render_ray, sample_along_ray
from .tensorfield import ColorHead, DeformationHead, SceneFlowHead, TensorField, TimeHeads, static_density

# NDC samples stop short of s = 1 (infinite depth) so world positions stay
# finite in 32-bit arithmetic; this is a depth of 1000 * near.
NDC_FAR = 1.0 - 1e-3

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class RaySamples:
    """Samples along a batch of rays, shared by both branches."""

    params: torch.Tensor  # (B, N) ray parameter (NDC s or contracted distance)
    field_pts: torch.Tensor  # (B, N, 3) positions in the field's box
    world_pts: torch.Tensor  # (B, N, 3)
    delta: torch.Tensor  # (B, N) scaled interval lengths in field space
    s_norm: torch.Tensor  # (B, N) normalized distances for the distortion loss
    s_delta: torch.Tensor  # (B, N)
    view_dirs: torch.Tensor  # (B, 3) unit world directions


class CameraSet(nn.Module):
    """Per-frame axis-angle + translation and one shared focal length.

    With ``relative`` each frame stores its pose relative to the neighbour one
    step closer to the middle frame, and absolute poses are the composed
    chain. Adjacent-frame constraints then act on a single parameter block
    instead of a difference of two, which keeps first-order optimization
    well conditioned along long trajectories.
    """

    def __init__(self, n_frames: int, width: int, height: int, init_focal: float,
                 gt_poses: np.ndarray | None = None, gt_focal: float | None = None,
                 optimize_poses: bool = True, optimize_focal: bool = True, relative: bool = False,
                 dtype=torch.float32):
        super().__init__()
        self.width, self.height = width, height
        self.cx, self.cy = width / 2, height / 2
        self.n_frames, self.anchor, self.relative = n_frames, n_frames // 2, relative
        self.register_buffer("focal_init", torch.tensor(float(init_focal if gt_focal is None else gt_focal), dtype=dtype))
        rot = torch.zeros(n_frames, 3, dtype=dtype)
        trans = torch.zeros(n_frames, 3, dtype=dtype)
        if gt_poses is not None:
            links = self.links_from_poses(np.asarray(gt_poses, np.float64)) if relative else np.asarray(gt_poses, np.float64)
            rot = torch.tensor(np.stack([geometry.matrix_to_axis_angle(P[:3, :3]) for P in links]), dtype=dtype)
            trans = torch.tensor(links[:, :3, 3], dtype=dtype)
        self.rotation = nn.Parameter(rot, requires_grad=optimize_poses)
        self.translation = nn.Parameter(trans, requires_grad=optimize_poses)
        self.log_focal = nn.Parameter(torch.zeros((), dtype=dtype), requires_grad=optimize_focal)

    def links_from_poses(self, poses: np.ndarray) -> np.ndarray:
        a = self.anchor
        links = poses.copy()
        for i in range(len(poses)):
            if i != a:
                k = i - 1 if i > a else i + 1
                links[i] = np.linalg.inv(poses[k]) @ poses[i]
        return links

    def focal(self, detach: bool = False) -> torch.Tensor:
        f = self.focal_init * torch.exp(self.log_focal)
        return f.detach() if detach else f

    def c2w(self, frames: torch.Tensor | None = None, detach: bool = False) -> torch.Tensor:
        if self.relative:
            L = geometry.pose_matrix(self.rotation, self.translation)
            a = self.anchor
            P = [None] * self.n_frames
            P[a] = L[a]
            for i in range(a + 1, self.n_frames):
                P[i] = P[i - 1] @ L[i]
            for i in range(a - 1, -1, -1):
                P[i] = P[i + 1] @ L[i]
            P = torch.stack(P)
            if frames is not None:
                P = P[frames]
        else:
            r, t = self.rotation, self.translation
            if frames is not None:
                r, t = r[frames], t[frames]
            P = geometry.pose_matrix(r, t)
        return P.detach() if detach else P

    @torch.no_grad()
    def wrap(self):
        self.rotation.copy_(geometry.wrap_axis_angle(self.rotation))

    def poses_numpy(self) -> np.ndarray:
        return self.c2w().detach().double().numpy()


class DynamicBranch(nn.Module):
    def __init__(self, cfg: TrainConfig, resolution: int, box, generator, dtype):
        super().__init__()
        self.field = TensorField(resolution, cfg.density_rank, cfg.app_rank, cfg.app_dim, *box,
                                 init_scale=cfg.init_scale, generator=generator, dtype=dtype)
        self.deform = DeformationHead(cfg.deform_width, cfg.deform_depth, cfg.pe_xyz, cfg.pe_time, cfg.deform_max, dtype)
        self.heads = TimeHeads(3 * cfg.density_rank, cfg.app_dim, cfg.time_width, cfg.time_depth, cfg.pe_time,
                               cfg.density_shift, dtype)
        self.scene_flow = SceneFlowHead(cfg.flow_width, cfg.flow_depth, cfg.pe_xyz, cfg.pe_time, cfg.flow_max, dtype)

    def forward(self, pts: torch.Tensor, t: torch.Tensor):
        canonical = self.deform(pts, t)
        dens, app, inside = self.field.sample(canonical)
        c, sigma, m = self.heads(dens, self.field.app_features(app), t)
        return c, sigma * inside.to(sigma.dtype), m

    def density(self, pts: torch.Tensor, t: torch.Tensor):
        canonical = self.deform(pts, t)
        dens, inside = self.field.density_features(canonical)
        tc = self.heads.time_code(t, dens)
        raw = self.heads.density_net(torch.cat([dens, tc], -1))
        sigma = torch.nn.functional.softplus(raw[..., 0] + dens.sum(-1) + self.heads.density_shift)
        return sigma * inside.to(sigma.dtype)


class Scene(nn.Module):
    def __init__(self, cfg: TrainConfig, n_frames: int, width: int, height: int,
                 gt_poses: np.ndarray | None = None, gt_focal: float | None = None,
                 static_res: int | None = None, dynamic_res: int | None = None):
        super().__init__()
        self.cfg = cfg
        dtype = DTYPES[cfg.dtype]
        self.dtype = dtype
        self.width, self.height = width, height
        f0 = cfg.init_focal or geometry.default_focal(width, height)
        self.ndc_focal = float(gt_focal if (cfg.use_gt_focal and gt_focal) else f0)
        # Scene frame -> dataset world. Known poses are re-expressed relative
        # to the middle camera so the forward-facing warp sees the content in
        # front of the z = -near plane.
        ref = np.eye(4)
        if cfg.use_gt_poses and gt_poses is not None:
            ref = np.asarray(gt_poses, np.float64)[n_frames // 2]
            gt_poses = np.linalg.inv(ref) @ np.asarray(gt_poses, np.float64)
        self.register_buffer("reference", torch.tensor(ref, dtype=torch.float64))
        self.cameras = CameraSet(
            n_frames, width, height, f0,
            gt_poses=gt_poses if cfg.use_gt_poses else None,
            gt_focal=gt_focal if cfg.use_gt_focal else None,
            optimize_poses=cfg.optimize_poses, optimize_focal=cfg.optimize_focal,
            relative=cfg.pose_param == "relative", dtype=dtype,
        )
        gen = torch.Generator().manual_seed(cfg.seed)
        if cfg.parameterization == "ndc":
            box = ((-cfg.ndc_xy_extent, -cfg.ndc_xy_extent, -1.0), (cfg.ndc_xy_extent, cfg.ndc_xy_extent, 1.0))
        else:
            box = ((-2.0,) * 3, (2.0,) * 3)
        self.static_field = TensorField(static_res or cfg.static_res_init, cfg.density_rank, cfg.app_rank, cfg.app_dim,
                                        *box, init_scale=cfg.init_scale, generator=gen, dtype=dtype)
        self.color = ColorHead(cfg.app_dim, cfg.color_width, cfg.color_depth, cfg.pe_view, dtype)
        self.dynamic = DynamicBranch(cfg, dynamic_res or cfg.dynamic_res_init, box, gen, dtype) if cfg.dynamic else None
        self.register_buffer("background", torch.tensor([1.0, 1.0, 1.0] if cfg.white_background else [0.0, 0.0, 0.0], dtype=dtype))

    # ------------------------------------------------------------------ rays
    def rays(self, frames: torch.Tensor, pixels: torch.Tensor, detach: bool = False, c2w: torch.Tensor | None = None,
             focal=None):
        c2w = self.cameras.c2w(frames, detach) if c2w is None else c2w
        focal = self.cameras.focal(detach) if focal is None else focal
        return geometry.generate_rays(c2w, focal, pixels, self.cameras.cx, self.cameras.cy)

    def sample(self, origins: torch.Tensor, dirs: torch.Tensor, stratified: bool,
               generator: torch.Generator | None = None, params: torch.Tensor | None = None) -> RaySamples:
        cfg = self.cfg
        n = cfg.n_samples
        B = origins.shape[0]
        if cfg.parameterization == "ndc":
            o, d, _ = geometry.ndc_rays(origins, dirs, cfg.near, self.ndc_focal, self.width, self.height)
            if params is None:
                params = sample_along_ray(0.0, NDC_FAR, n, stratified, generator, (B,), origins.dtype)
            pts = o[:, None, :] + params[..., None] * d[:, None, :]
            world = geometry.ndc_to_world(pts, cfg.near, self.ndc_focal, self.width, self.height)
            s0, s1 = 0.0, NDC_FAR
        else:
            scale = cfg.contraction_scale
            s0 = float(geometry.contract_distance(torch.tensor(scale * cfg.near)))
            s1 = float(geometry.contract_distance(torch.tensor(scale * 1e4)))
            if params is None:
                params = sample_along_ray(s0, s1, n, stratified, generator, (B,), origins.dtype)
            dist = geometry.uncontract_distance(params) / scale
            world = origins[:, None, :] + dist[..., None] * dirs[:, None, :]
            pts = geometry.contract(scale * world)
        delta = intervals(pts) * cfg.distance_scale
        s_norm = (params - s0) / (s1 - s0)
        s_delta = torch.cat([s_norm[:, 1:] - s_norm[:, :-1], s_norm[:, -1:] - s_norm[:, -2:-1]], -1)
        return RaySamples(params, pts, world, delta, s_norm, s_delta, dirs)

    # --------------------------------------------------------------- branches
    def static_density(self, pts: torch.Tensor) -> torch.Tensor:
        dens, inside = self.static_field.density_features(pts)
        return static_density(dens, self.cfg.density_shift) * inside.to(pts.dtype)

    def static_eval(self, samples: RaySamples):
        dens, app, inside = self.static_field.sample(samples.field_pts)
        sigma = static_density(dens, self.cfg.density_shift) * inside.to(dens.dtype)
        view = samples.view_dirs[:, None, :].expand(samples.field_pts.shape)
        color = self.color(self.static_field.app_features(app), view)
        return sigma, color

    def render_static(self, samples: RaySamples, with_color: bool = True) -> tuple[RenderOutput, torch.Tensor, torch.Tensor]:
        if with_color:
            sigma, color = self.static_eval(samples)
        else:
            sigma = self.static_density(samples.field_pts)
            color = torch.zeros(sigma.shape + (3,), dtype=sigma.dtype)
        out = render_ray(sigma, color, samples.delta, samples.params, self.background if with_color else None)
        return out, sigma, color

    def dynamic_eval(self, samples: RaySamples, t: torch.Tensor):
        tt = t.reshape(-1, 1, 1).expand(samples.field_pts.shape[:-1] + (1,))
        return self.dynamic(samples.field_pts, tt)

    def dynamic_density(self, samples: RaySamples, t: torch.Tensor):
        tt = t.reshape(-1, 1, 1).expand(samples.field_pts.shape[:-1] + (1,))
        return self.dynamic.density(samples.field_pts, tt)

    def scene_flow(self, pts: torch.Tensor, t: torch.Tensor):
        return self.dynamic.scene_flow(pts, t.reshape(-1, 1))

    def composite(self, sigma_s, color_s, sigma_d, color_d, m, samples_s: RaySamples, samples_d: RaySamples):
        return composite_render(sigma_s, color_s, sigma_d, color_d, m, samples_s.delta, samples_s.params,
                                self.background, delta_d=samples_d.delta)

    # ------------------------------------------------------------- inference
    @torch.no_grad()
    def render_image(self, c2w: torch.Tensor, time: float, focal=None, chunk: int = 4096) -> dict[str, np.ndarray]:
        """Full-frame render at a pose and normalized time."""
        from .motionmask import pixel_grid

        H, W = self.height, self.width
        px = torch.tensor(pixel_grid(H, W).reshape(-1, 2), dtype=self.dtype)
        focal = self.cameras.focal() if focal is None else torch.as_tensor(focal, dtype=self.dtype)
        outs = {k: [] for k in ("rgb", "depth", "static_rgb", "dynamic_rgb", "mask")}
        for start in range(0, len(px), chunk):
            p = px[start:start + chunk]
            o, d = geometry.generate_rays(c2w.to(self.dtype), focal, p, self.cameras.cx, self.cameras.cy)
            samples = self.sample(o, d, stratified=False)
            out_s, sig_s, col_s = self.render_static(samples)
            outs["static_rgb"].append(out_s.color)
            if self.dynamic is not None:
                t = torch.full((len(p),), float(time), dtype=self.dtype)
                c_d, sig_d, m = self.dynamic_eval(samples, t)
                out_d = render_ray(sig_d, c_d, samples.delta, samples.params, self.background)
                comp = self.composite(sig_s, col_s, sig_d, c_d, m, samples, samples)
                outs["rgb"].append(comp.color)
                outs["dynamic_rgb"].append(out_d.color)
                outs["mask"].append(comp.nonrigidity)
                z = self._camera_depth(comp, samples, c2w)
            else:
                outs["rgb"].append(out_s.color)
                z = self._camera_depth(out_s, samples, c2w)
            outs["depth"].append(z)
        res = {}
        for k, v in outs.items():
            if v:
                arr = torch.cat(v).double().numpy()
                res[k] = arr.reshape(H, W, -1) if arr.ndim == 2 else arr.reshape(H, W)
        return res

    def _camera_depth(self, out: RenderOutput, samples: RaySamples, c2w: torch.Tensor):
        from .losses import surface_point

        X, _ = surface_point(out.weights, samples.world_pts)
        return -geometry.world_to_camera(X, c2w.to(X.dtype))[..., 2]

    def to_scene_frame(self, c2w_world: np.ndarray) -> np.ndarray:
        return np.linalg.inv(self.reference.numpy()) @ np.asarray(c2w_world, np.float64)

    def to_world_frame(self, c2w_scene: np.ndarray) -> np.ndarray:
        return self.reference.numpy() @ np.asarray(c2w_scene, np.float64)

    def resolutions(self) -> dict[str, int]:
        out = {"static": self.static_field.resolution[0]}
        if self.dynamic is not None:
            out["dynamic"] = self.dynamic.field.resolution[0]
        return out
