"""Pinhole camera, axis-angle poses, rays, projection, NDC and contraction.

Conventions (used everywhere in the package): right-handed world, the
camera looks down its own -z axis with +y up, poses are camera-to-world.
Pixel coordinates are continuous with +v pointing down the image; the
centre of pixel (col, row) sits at (col + 0.5, row + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import register


@dataclass
class Intrinsics:
    focal: float | torch.Tensor
    width: int
    height: int
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        if self.cx is None:
            self.cx = self.width / 2
        if self.cy is None:
            self.cy = self.height / 2
        f = float(self.focal) if not isinstance(self.focal, torch.Tensor) else float(self.focal.detach())
        if not f > 0:
            raise ValueError(f"focal must be positive, got {f}")

    def with_focal(self, focal) -> "Intrinsics":
        return Intrinsics(focal, self.width, self.height, self.cx, self.cy)


def default_focal(width: int, height: int) -> float:
    return float(max(width, height))


# ---------------------------------------------------------------------------
# rotations

def _rodrigues_coeffs(theta2: torch.Tensor):
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = safe2.sqrt()
    a = torch.where(small, 1 - theta2 / 6 + theta2 ** 2 / 120, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24 + theta2 ** 2 / 720, (1 - torch.cos(theta)) / safe2)
    return a, b


def skew(v: torch.Tensor) -> torch.Tensor:
    z = torch.zeros_like(v[..., 0])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return torch.stack([
        torch.stack([z, -w, y], -1),
        torch.stack([w, z, -x], -1),
        torch.stack([-y, x, z], -1),
    ], -2)


def axis_angle_to_matrix(r: torch.Tensor) -> torch.Tensor:
    """Rodrigues' formula, smooth through the zero rotation."""
    theta2 = (r * r).sum(-1)
    a, b = _rodrigues_coeffs(theta2)
    k = skew(r)
    eye = torch.eye(3, dtype=r.dtype, device=r.device).expand(k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def matrix_to_axis_angle(R: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    return Rotation.from_matrix(np.asarray(R)).as_rotvec()


def wrap_axis_angle(r: torch.Tensor) -> torch.Tensor:
    """Map rotation vectors with norm >= pi to the equivalent one of norm < pi."""
    theta = r.norm(dim=-1, keepdim=True)
    over = theta >= math.pi
    wrapped = torch.remainder(theta + math.pi, 2 * math.pi) - math.pi
    scale = torch.where(over, wrapped / theta.clamp_min(1e-12), torch.ones_like(theta))
    return r * scale


def pose_matrix(rotation: torch.Tensor, translation: torch.Tensor) -> torch.Tensor:
    """Camera-to-world 4x4 transforms from axis-angle + translation."""
    R = axis_angle_to_matrix(rotation)
    top = torch.cat([R, translation[..., :, None]], -1)
    bottom = torch.zeros(top.shape[:-2] + (1, 4), dtype=top.dtype, device=top.device)
    bottom[..., 0, 3] = 1
    return torch.cat([top, bottom], -2)


def invert_pose(c2w: torch.Tensor) -> torch.Tensor:
    R = c2w[..., :3, :3]
    t = c2w[..., :3, 3]
    Rt = R.transpose(-1, -2)
    top = torch.cat([Rt, -(Rt @ t[..., None])], -1)
    return torch.cat([top, c2w[..., 3:, :]], -2)


# ---------------------------------------------------------------------------
# rays and projection

def camera_directions(pixels: torch.Tensor, focal, cx: float, cy: float) -> torch.Tensor:
    """Unnormalized camera-frame directions (z = -1) through continuous pixels."""
    u, v = pixels[..., 0], pixels[..., 1]
    x = (u - cx) / focal
    y = -(v - cy) / focal
    return torch.stack([x, y, -torch.ones_like(x)], -1)


def generate_rays(c2w: torch.Tensor, focal, pixels: torch.Tensor, cx: float, cy: float):
    """Pinhole rays in world space.

    ``c2w`` broadcasts against ``pixels[..., :]``. Returns unit directions.
    """
    d_cam = camera_directions(pixels, focal, cx, cy)
    R = c2w[..., :3, :3]
    d = (R @ d_cam[..., None])[..., 0]
    d = d / d.norm(dim=-1, keepdim=True)
    o = c2w[..., :3, 3].expand(d.shape)
    return o, d


def world_to_camera(points: torch.Tensor, c2w: torch.Tensor) -> torch.Tensor:
    R = c2w[..., :3, :3]
    t = c2w[..., :3, 3]
    return (R.transpose(-1, -2) @ (points - t)[..., None])[..., 0]


def project(points: torch.Tensor, c2w: torch.Tensor, focal, cx: float, cy: float, eps: float = 1e-6):
    """World points -> (continuous pixels, positive depth, in-front flag).

    Points behind the camera are flagged invalid; their pixels are computed
    from a clamped depth so they stay finite.
    """
    pc = world_to_camera(points, c2w)
    depth = -pc[..., 2]
    valid = depth > eps
    z = torch.where(valid, depth, torch.full_like(depth, eps))
    u = focal * pc[..., 0] / z + cx
    v = -focal * pc[..., 1] / z + cy
    return torch.stack([u, v], -1), depth, valid


def unproject(pixels: torch.Tensor, depth: torch.Tensor, c2w: torch.Tensor, focal, cx: float, cy: float):
    """Continuous pixels with camera z-depth -> world points."""
    d_cam = camera_directions(pixels, focal, cx, cy) * depth[..., None]
    R = c2w[..., :3, :3]
    return (R @ d_cam[..., None])[..., 0] + c2w[..., :3, 3]


# ---------------------------------------------------------------------------
# ray-space parameterizations

def ndc_rays(origins: torch.Tensor, dirs: torch.Tensor, near: float, focal, width: int, height: int):
    """Forward-facing NDC warp of world rays.

    The ray is first advanced to the plane z = -near; in NDC the ray is
    ``o' + s d'`` with s in [0, 1) covering the near plane to infinity.
    Returns (o', d', valid) where rays parallel to the image plane are
    invalid.
    """
    dz = dirs[..., 2]
    valid = dz.abs() > 1e-12
    dz = torch.where(valid, dz, torch.full_like(dz, -1e-12))
    t = -(near + origins[..., 2]) / dz
    o = origins + t[..., None] * dirs
    ox, oy, oz = o[..., 0], o[..., 1], o[..., 2]
    ax = -2 * focal / width
    ay = -2 * focal / height
    o_ndc = torch.stack([ax * ox / oz, ay * oy / oz, 1 + 2 * near / oz], -1)
    d_ndc = torch.stack([
        ax * (dirs[..., 0] / dz - ox / oz),
        ay * (dirs[..., 1] / dz - oy / oz),
        -2 * near / oz,
    ], -1)
    return o_ndc, d_ndc, valid


def ndc_point(points: torch.Tensor, near: float, focal, width: int, height: int) -> torch.Tensor:
    x, y, z = points[..., 0], points[..., 1], points[..., 2]
    return torch.stack([-2 * focal / width * x / z, -2 * focal / height * y / z, 1 + 2 * near / z], -1)


def ndc_to_world(p: torch.Tensor, near: float, focal, width: int, height: int) -> torch.Tensor:
    z = 2 * near / (p[..., 2] - 1)
    x = -p[..., 0] * z * width / (2 * focal)
    y = -p[..., 1] * z * height / (2 * focal)
    return torch.stack([x, y, z], -1)


def contract(x: torch.Tensor) -> torch.Tensor:
    """Identity inside the unit ball, ``(2 - 1/|x|) x/|x|`` outside."""
    n2 = (x * x).sum(-1, keepdim=True)
    outside = n2 > 1
    n = torch.where(outside, n2, torch.ones_like(n2)).sqrt()
    return torch.where(outside, (2 - 1 / n) * x / n, x)


def contract_distance(r: torch.Tensor) -> torch.Tensor:
    return torch.where(r <= 1, r, 2 - 1 / r.clamp_min(1.0))


def uncontract_distance(s: torch.Tensor) -> torch.Tensor:
    return torch.where(s <= 1, s, 1 / (2 - s.clamp(1.0, 2 - 1e-12)))


# ---------------------------------------------------------------------------
# registered ops for gradient checks

def _pose_sampler(rng):
    r = torch.tensor(rng.normal(size=3) * 0.8)
    t = torch.tensor(rng.normal(size=3))
    f = torch.tensor(rng.uniform(40, 120))
    px = torch.tensor(rng.uniform(0, 64, size=(4, 2)))
    return r, t, f, px


@register("pose_to_ray", _pose_sampler)
def _pose_to_ray(r, t, f, px):
    o, d = generate_rays(pose_matrix(r, t), f, px, 32.0, 24.0)
    return torch.cat([o, d], -1)


def _project_sampler(rng):
    r, t, f, _ = _pose_sampler(rng)
    c2w = pose_matrix(r, t)
    depth = torch.tensor(rng.uniform(1, 5, size=4))
    px = torch.tensor(rng.uniform(0, 64, size=(4, 2)))
    pts = unproject(px, depth, c2w, f, 32.0, 24.0)
    return pts, r, t, f


@register("project", _project_sampler)
def _project_op(pts, r, t, f):
    uv, depth, _ = project(pts, pose_matrix(r, t), f, 32.0, 24.0)
    return torch.cat([uv.reshape(-1), depth.reshape(-1)])


def _ndc_sampler(rng):
    o = torch.tensor(rng.normal(size=(4, 3)) * 0.2)
    d = torch.tensor(rng.normal(size=(4, 3)) * 0.3 + np.array([0, 0, -1.0]))
    f = torch.tensor(rng.uniform(40, 120))
    return o, d, f


@register("ndc_map", _ndc_sampler)
def _ndc_op(o, d, f):
    on, dn, _ = ndc_rays(o, d, 1.0, f, 64, 48)
    return torch.cat([on, dn], -1)


def _contract_sampler(rng):
    x = rng.normal(size=(6, 3))
    x *= rng.uniform(0.2, 4.0, size=(6, 1)) / np.linalg.norm(x, axis=-1, keepdims=True)
    # keep away from the unit sphere where the second derivative jumps
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    x = np.where(np.abs(n - 1) < 0.05, x * 1.2, x)
    return (torch.tensor(x),)


register("contract", _contract_sampler)(contract)
