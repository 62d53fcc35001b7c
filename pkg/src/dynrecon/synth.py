"""Synthetic ground-truth scenes and an independent reference renderer.

Scenes are made of textured boxes and spheres rendered by exact ray
intersection, so depth, flow, scene flow and motion masks are exact.
Object motion and the camera trajectory are closed-form functions of the
normalized time ``tau`` in [0, 1]; frame ``i`` of ``n`` sits at
``tau = i / (n - 1)``. Movers translate without rotating.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Dataset


@dataclass
class Texture:
    base: tuple[float, float, float] = (0.5, 0.5, 0.5)
    amplitude: float = 0.25
    n_waves: int = 3
    frequency: float = 3.0
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        dirs = rng.normal(size=(self.n_waves, 3))
        self._omega = dirs / np.linalg.norm(dirs, axis=1, keepdims=True) * self.frequency
        self._phase = rng.uniform(0, 2 * np.pi, size=self.n_waves)
        self._tint = rng.uniform(0.4, 1.0, size=(self.n_waves, 3))

    def albedo(self, local: np.ndarray) -> np.ndarray:
        waves = np.sin(local @ self._omega.T + self._phase)  # (P, K)
        c = np.asarray(self.base) + self.amplitude * (waves @ self._tint) / self.n_waves
        return np.clip(c, 0.0, 1.0)


@dataclass
class Primitive:
    kind: str  # "box" | "sphere"
    center: tuple[float, float, float]
    size: tuple[float, float, float] | float  # box half-extents or sphere radius
    texture: Texture = field(default_factory=Texture)
    # motion, for dynamic primitives
    motion: str = "static"  # "static" | "linear" | "circle"
    displacement: tuple[float, float, float] = (0.0, 0.0, 0.0)  # linear: total offset over tau in [0, 1]
    circle_radius: float = 0.0
    circle_sweep: float = 0.0  # radians over the sequence
    circle_axes: tuple[int, int] = (0, 1)

    def offset(self, tau: float) -> np.ndarray:
        if self.motion == "linear":
            return tau * np.asarray(self.displacement, dtype=np.float64)
        if self.motion == "circle":
            a, b = self.circle_axes
            out = np.zeros(3)
            ang = tau * self.circle_sweep
            out[a] = self.circle_radius * (math.cos(ang) - 1)
            out[b] = self.circle_radius * math.sin(ang)
            return out
        return np.zeros(3)

    def position(self, tau: float) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + self.offset(tau)

    @property
    def dynamic(self) -> bool:
        return self.motion != "static"

    def intersect(self, o: np.ndarray, d: np.ndarray, tau: float):
        """Nearest positive hit distance (inf on miss) and outward normals."""
        c = self.position(tau)
        if self.kind == "sphere":
            r = float(self.size)
            oc = o - c
            b = np.einsum("ij,ij->i", oc, d)
            q = np.einsum("ij,ij->i", oc, oc) - r * r
            disc = b * b - q
            s = np.sqrt(np.maximum(disc, 0))
            t0, t1 = -b - s, -b + s
            t = np.where(t0 > 1e-9, t0, np.where(t1 > 1e-9, t1, np.inf))
            t = np.where(disc >= 0, t, np.inf)
            p = o + np.where(np.isfinite(t), t, 0)[:, None] * d
            n = (p - c) / r
            return t, n
        half = np.asarray(self.size, dtype=np.float64)
        lo, hi = c - half, c + half
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        tmin = np.where(np.isnan(tmin), -np.inf, tmin)
        tmax = np.where(np.isnan(tmax), np.inf, tmax)
        enter = tmin.max(1)
        leave = tmax.min(1)
        hit = (leave >= enter) & (leave > 1e-9)
        t = np.where(hit, np.where(enter > 1e-9, enter, leave), np.inf)
        p = o + np.where(np.isfinite(t), t, 0)[:, None] * d
        rel = (p - c) / half
        axis = np.argmax(np.abs(rel), 1)
        n = np.zeros_like(p)
        n[np.arange(len(p)), axis] = np.sign(rel[np.arange(len(p)), axis])
        return t, n

    def aabb(self, tau: float = 0.0):
        c = self.position(tau)
        half = np.full(3, float(self.size)) if self.kind == "sphere" else np.asarray(self.size, dtype=np.float64)
        return c - half, c + half


@dataclass
class Trajectory:
    kind: str = "orbit"  # "orbit" | "forward" | "rotation"
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 4.0
    arc_degrees: float = 30.0
    height: float = 0.3
    travel: float = 1.5  # forward: distance moved along -z

    def c2w(self, tau: float) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        if self.kind == "orbit":
            ang = math.radians(self.arc_degrees) * (tau - 0.5)
            pos = c + np.array([self.radius * math.sin(ang), self.height, self.radius * math.cos(ang)])
            return look_at(pos, c)
        if self.kind == "forward":
            pos = c + np.array([0.3 * math.sin(2 * math.pi * tau), self.height, self.radius - self.travel * tau])
            return look_at(pos, pos + np.array([0.0, -self.height / self.radius, -1.0]))
        if self.kind == "rotation":
            ang = math.radians(self.arc_degrees) * (tau - 0.5)
            pos = c + np.array([0.0, self.height, self.radius])
            target = pos + np.array([-math.sin(ang), -self.height / self.radius, -math.cos(ang)])
            return look_at(pos, target)
        raise ValueError(f"unknown trajectory kind {self.kind!r}")


def look_at(position: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    z = position - target
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    P = np.eye(4)
    P[:3, 0], P[:3, 1], P[:3, 2], P[:3, 3] = x, y, z, position
    return P


@dataclass
class SceneSpec:
    primitives: list[Primitive]
    trajectory: Trajectory = field(default_factory=Trajectory)
    width: int = 96
    height: int = 72
    focal: float = 80.0
    n_frames: int = 30
    seed: int = 0
    light: tuple[float, float, float] = (0.4, 0.8, 0.45)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def validate(self) -> list[str]:
        problems = []
        prims = self.primitives
        for a in range(len(prims)):
            for b in range(a + 1, len(prims)):
                if _overlap(prims[a], prims[b]):
                    problems.append(f"primitives {a} and {b} intersect at t=0")
        return problems

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        prims = []
        for p in d.pop("primitives"):
            p = dict(p)
            tex = Texture(**p.pop("texture", {}))
            prims.append(Primitive(texture=tex, **p))
        traj = Trajectory(**d.pop("trajectory", {}))
        return cls(primitives=prims, trajectory=traj, **d)


def _overlap(p: Primitive, q: Primitive, tol: float = 1e-9) -> bool:
    if p.kind == "sphere" and q.kind == "sphere":
        return np.linalg.norm(p.position(0) - q.position(0)) < float(p.size) + float(q.size) - tol
    if p.kind == "sphere" or q.kind == "sphere":
        s, b = (p, q) if p.kind == "sphere" else (q, p)
        lo, hi = b.aabb(0)
        c = s.position(0)
        closest = np.clip(c, lo, hi)
        return np.linalg.norm(c - closest) < float(s.size) - tol
    lo1, hi1 = p.aabb(0)
    lo2, hi2 = q.aabb(0)
    return bool(np.all(np.minimum(hi1, hi2) - np.maximum(lo1, lo2) > tol))


# ---------------------------------------------------------------------------
# rendering

def pixel_centers(width: int, height: int) -> np.ndarray:
    v, u = np.mgrid[0:height, 0:width]
    return np.stack([u + 0.5, v + 0.5], -1).reshape(-1, 2).astype(np.float64)


def camera_rays(c2w: np.ndarray, focal: float, px: np.ndarray, cx: float, cy: float):
    d_cam = np.stack([(px[:, 0] - cx) / focal, -(px[:, 1] - cy) / focal, -np.ones(len(px))], -1)
    d = d_cam @ c2w[:3, :3].T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(c2w[:3, 3], d.shape).copy()
    return o, d


def project_points(X: np.ndarray, c2w: np.ndarray, focal: float, cx: float, cy: float):
    pc = (X - c2w[:3, 3]) @ c2w[:3, :3]
    z = -pc[:, 2]
    return np.stack([focal * pc[:, 0] / z + cx, -focal * pc[:, 1] / z + cy], -1), z


@dataclass
class FrameRender:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W) camera z
    points: np.ndarray  # (H*W, 3) world hit points
    object_id: np.ndarray  # (H*W,) primitive index, -1 on miss
    c2w: np.ndarray


def render_frame(spec: SceneSpec, tau: float, c2w: np.ndarray | None = None) -> FrameRender:
    c2w = spec.trajectory.c2w(tau) if c2w is None else c2w
    w, h = spec.width, spec.height
    px = pixel_centers(w, h)
    o, d = camera_rays(c2w, spec.focal, px, w / 2, h / 2)
    best_t = np.full(len(px), np.inf)
    best_n = np.zeros((len(px), 3))
    obj = np.full(len(px), -1)
    for k, prim in enumerate(spec.primitives):
        t, n = prim.intersect(o, d, tau)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n[closer]
        obj[closer] = k
    hit = np.isfinite(best_t)
    X = o + np.where(hit, best_t, 0)[:, None] * d
    rgb = np.tile(np.asarray(spec.background, dtype=np.float64), (len(px), 1))
    light = np.asarray(spec.light) / np.linalg.norm(spec.light)
    for k, prim in enumerate(spec.primitives):
        sel = obj == k
        if not sel.any():
            continue
        local = X[sel] - prim.position(tau)
        shade = 0.6 + 0.4 * np.clip(best_n[sel] @ light, 0, 1)
        rgb[sel] = prim.texture.albedo(local) * shade[:, None]
    z = -((X - c2w[:3, 3]) @ c2w[:3, :3])[:, 2]
    depth = np.where(hit, z, np.inf)
    return FrameRender(rgb.reshape(h, w, 3), depth.reshape(h, w), X, obj, c2w)


def correspond(spec: SceneSpec, fr: FrameRender, tau_i: float, tau_j: float, c2w_j: np.ndarray):
    """Exact flow and scene flow of every pixel of frame ``fr`` towards time ``tau_j``."""
    X = fr.points
    moved = X.copy()
    for k, prim in enumerate(spec.primitives):
        if prim.dynamic:
            sel = fr.object_id == k
            moved[sel] += prim.position(tau_j) - prim.position(tau_i)
    w, h = spec.width, spec.height
    px_j, _ = project_points(moved, c2w_j, spec.focal, w / 2, h / 2)
    flow = (px_j - pixel_centers(w, h)).reshape(h, w, 2)
    return flow, (moved - X).reshape(h, w, 3)


def dynamic_mask(spec: SceneSpec, fr: FrameRender) -> np.ndarray:
    dyn = np.array([p.dynamic for p in spec.primitives] + [False])
    return dyn[fr.object_id].reshape(spec.height, spec.width)


def generate(spec: SceneSpec, taus: np.ndarray | None = None) -> Dataset:
    problems = spec.validate()
    if problems:
        raise ValueError("invalid scene: " + "; ".join(problems))
    taus = np.linspace(0, 1, spec.n_frames) if taus is None else np.asarray(taus, dtype=np.float64)
    n = len(taus)
    renders = [render_frame(spec, float(t)) for t in taus]
    flow_fwd, flow_bwd, sf_fwd, sf_bwd = [], [], [], []
    for i in range(n - 1):
        fl, sf = correspond(spec, renders[i], taus[i], taus[i + 1], renders[i + 1].c2w)
        flow_fwd.append(fl.astype(np.float32))
        sf_fwd.append(sf)
    for i in range(1, n):
        fl, sf = correspond(spec, renders[i], taus[i], taus[i - 1], renders[i - 1].c2w)
        flow_bwd.append(fl.astype(np.float32))
        sf_bwd.append(sf)
    rng = np.random.default_rng(spec.seed + 7919)
    a, b = rng.uniform(0.5, 3.0), rng.uniform(-0.2, 0.5)
    depth = np.stack([r.depth for r in renders])
    disp = (a / depth + b).astype(np.float32)
    masks = np.stack([dynamic_mask(spec, r) for r in renders])
    return Dataset(
        frames=np.stack([r.rgb for r in renders]).astype(np.float32),
        flow_fwd=flow_fwd, flow_bwd=flow_bwd, disparity=disp, mask=masks.copy(), times=taus.copy(),
        gt_poses=np.stack([r.c2w for r in renders]), gt_focal=spec.focal, gt_depth=depth.astype(np.float32),
        gt_mask=masks, gt_sceneflow_fwd=sf_fwd, gt_sceneflow_bwd=sf_bwd,
        meta={"disparity_affine": (a, b)},
    )


# ---------------------------------------------------------------------------
# presets

def _room(seed: int) -> list[Primitive]:
    return [
        Primitive("box", (0.0, 0.0, -3.4), (9.0, 7.0, 0.2), Texture((0.55, 0.5, 0.45), 0.35, 4, 1.6, seed + 1)),
        Primitive("box", (0.0, -1.4, 1.0), (9.0, 0.2, 4.2), Texture((0.4, 0.45, 0.5), 0.3, 3, 2.0, seed + 2)),
        Primitive("box", (-1.0, -0.75, 0.0), (0.45, 0.45, 0.45), Texture((0.75, 0.35, 0.3), 0.35, 3, 3.0, seed + 3)),
        Primitive("sphere", (1.1, -0.55, -0.9), 0.65, Texture((0.3, 0.55, 0.75), 0.35, 3, 3.0, seed + 4)),
        Primitive("box", (0.3, 0.6, -1.9), (0.8, 0.45, 0.4), Texture((0.45, 0.7, 0.35), 0.35, 3, 2.5, seed + 5)),
    ]


def preset(name: str, n_frames: int = 30, width: int = 96, height: int = 72, seed: int = 0) -> SceneSpec:
    prims = _room(seed)
    traj = Trajectory("orbit")
    if name == "static_orbit":
        pass
    elif name == "rotation_only":
        traj = Trajectory("rotation", arc_degrees=24.0)
    elif name == "one_mover":
        prims.append(Primitive("box", (-0.55, 0.0, 1.3), (0.5, 0.5, 0.5),
                               Texture((0.85, 0.75, 0.25), 0.3, 3, 3.0, seed + 11),
                               motion="linear", displacement=(0.8, 0.5, 0.0)))
    elif name == "two_movers":
        prims.append(Primitive("box", (-0.55, 0.0, 1.3), (0.4, 0.4, 0.4),
                               Texture((0.85, 0.75, 0.25), 0.3, 3, 3.0, seed + 11),
                               motion="linear", displacement=(0.8, 0.5, 0.0)))
        prims.append(Primitive("sphere", (0.9, 0.6, 0.6), 0.3,
                               Texture((0.8, 0.3, 0.7), 0.3, 3, 3.0, seed + 12),
                               motion="circle", circle_radius=0.4, circle_sweep=math.pi, circle_axes=(0, 1)))
    else:
        raise ValueError(f"unknown preset {name!r}; choose static_orbit, rotation_only, one_mover, two_movers")
    return SceneSpec(prims, traj, width=width, height=height, n_frames=n_frames, seed=seed)


PRESET_NAMES = ("static_orbit", "rotation_only", "one_mover", "two_movers")


def load_spec(path_or_preset: str, seed: int = 0) -> SceneSpec:
    if path_or_preset in PRESET_NAMES:
        return preset(path_or_preset, seed=seed)
    return SceneSpec.from_dict(json.loads(Path(path_or_preset).read_text()))


# ---------------------------------------------------------------------------
# reference renderer: straightforward loops, shares no code with rendering

def oracle_render(sigma, color, delta, t=None, background=None):
    """Per-ray accumulation with explicit loops. Returns (rgb, depth, opacity, weights)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    color = np.asarray(color, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    n = len(sigma)
    rgb = [0.0, 0.0, 0.0]
    weights = []
    optical = 0.0
    for i in range(n):
        T = math.exp(-optical)
        a = 1.0 - math.exp(-sigma[i] * delta[i])
        w = T * a
        weights.append(w)
        for k in range(3):
            rgb[k] += w * color[i][k]
        optical += sigma[i] * delta[i]
    acc = sum(weights)
    if background is not None:
        rgb = [rgb[k] + (1 - acc) * background[k] for k in range(3)]
    depth = 0.0
    if t is not None and acc > 1e-10:
        depth = sum(w * ti for w, ti in zip(weights, t)) / acc
    return np.array(rgb), depth, acc, np.array(weights)


def oracle_composite(sigma_s, color_s, sigma_d, color_d, m, delta):
    """Blended static/dynamic accumulation with explicit loops.

    Returns (rgb, nonrigidity). Transmittance multiplies the survival
    probability ``1 - alpha`` of the blended opacity at every earlier sample.
    """
    rgb = [0.0, 0.0, 0.0]
    mask = 0.0
    T = 1.0
    for i in range(len(delta)):
        a_s = 1.0 - math.exp(-float(sigma_s[i]) * float(delta[i]))
        a_d = 1.0 - math.exp(-float(sigma_d[i]) * float(delta[i]))
        mi = float(m[i])
        for k in range(3):
            rgb[k] += T * (mi * a_d * float(color_d[i][k]) + (1 - mi) * a_s * float(color_s[i][k]))
        mask += T * a_d * mi
        T *= 1.0 - (mi * a_d + (1 - mi) * a_s)
    return np.array(rgb), mask
