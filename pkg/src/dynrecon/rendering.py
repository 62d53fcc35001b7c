"""Emission-absorption volume rendering along sampled rays.

All functions are batched over leading dimensions; the sample axis is the
last one. Transmittance is the exclusive cumulative product of ``1 - alpha``,
which equals ``exp(-sum_{j<i} sigma_j delta_j)`` for a single branch and
stays well defined when two branches are blended at the alpha level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import register


@dataclass
class RenderOutput:
    color: torch.Tensor  # (..., 3)
    depth: torch.Tensor  # (...,)
    opacity: torch.Tensor  # (...,)
    weights: torch.Tensor  # (..., N)
    transmittance: torch.Tensor  # (..., N)
    nonrigidity: torch.Tensor | None = None  # (...,)


def sample_along_ray(near, far, n: int, stratified: bool = False, generator: torch.Generator | None = None,
                     shape=(), dtype=torch.float64) -> torch.Tensor:
    """``n`` sorted ray parameters in ``[near, far]``: stratum midpoints or jittered."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    near = torch.as_tensor(near, dtype=dtype)
    far = torch.as_tensor(far, dtype=dtype)
    if not bool((near < far).all()):
        raise ValueError("near must be < far")
    base = torch.arange(n, dtype=dtype)
    if stratified:
        u = torch.rand(tuple(shape) + (n,), generator=generator, dtype=dtype)
    else:
        u = torch.full(tuple(shape) + (n,), 0.5, dtype=dtype)
    frac = (base + u) / n
    return near[..., None] + frac * (far - near)[..., None]


def intervals(points: torch.Tensor) -> torch.Tensor:
    """Distances between consecutive samples ``(..., N, 3) -> (..., N)``; the last repeats."""
    d = (points[..., 1:, :] - points[..., :-1, :]).norm(dim=-1)
    return torch.cat([d, d[..., -1:]], -1)


def alpha(sigma: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    return 1 - torch.exp(-sigma * delta)


def transmittance(alpha_: torch.Tensor) -> torch.Tensor:
    ones = torch.ones_like(alpha_[..., :1])
    return torch.cumprod(torch.cat([ones, 1 - alpha_[..., :-1]], -1), -1)


def render_depth(weights: torch.Tensor, t: torch.Tensor, eps: float = 1e-10):
    """Expected termination distance; returns (depth, low_opacity flag)."""
    acc = weights.sum(-1)
    depth = (weights * t).sum(-1) / acc.clamp_min(eps)
    return depth, acc < eps


def _finish(a: torch.Tensor, emitted: torch.Tensor, t, background) -> RenderOutput:
    T = transmittance(a)
    weights = T * a
    color = (T[..., None] * emitted).sum(-2)
    opacity = weights.sum(-1)
    if background is not None:
        color = color + (1 - opacity)[..., None] * background
    depth = render_depth(weights, t)[0] if t is not None else torch.zeros_like(opacity)
    return RenderOutput(color, depth, opacity, weights, T)


def render_ray(sigma: torch.Tensor, color: torch.Tensor, delta: torch.Tensor, t: torch.Tensor | None = None,
               background=None) -> RenderOutput:
    a = alpha(sigma, delta)
    return _finish(a, a[..., None] * color, t, background)


def blended_alpha(alpha_s, alpha_d, m):
    """Effective per-sample opacity when the dynamic branch takes share ``m``."""
    return m * alpha_d + (1 - m) * alpha_s


def composite_render(sigma_s, color_s, sigma_d, color_d, m, delta, t=None, background=None,
                     delta_d=None) -> RenderOutput:
    """Static and dynamic samples blended by per-sample nonrigidity ``m``.

    ``delta_d`` lets the dynamic branch use interval lengths detached from
    the camera parameters; it defaults to ``delta``.
    """
    a_s = alpha(sigma_s, delta)
    a_d = alpha(sigma_d, delta if delta_d is None else delta_d)
    emitted = (m * a_d)[..., None] * color_d + ((1 - m) * a_s)[..., None] * color_s
    out = _finish(blended_alpha(a_s, a_d, m), emitted, t, background)
    out.nonrigidity = (out.transmittance * a_d * m).sum(-1)
    return out


def distortion_loss(weights: torch.Tensor, s: torch.Tensor, delta: torch.Tensor) -> torch.Tensor:
    """Per-ray ``sum_ij w_i w_j |s_i - s_j| + 1/3 sum_i w_i^2 delta_i`` in O(N).

    ``s`` are sorted sample midpoints (normalized distances), ``delta`` the
    matching interval widths.
    """
    w_before = torch.cumsum(weights, -1) - weights
    ws_before = torch.cumsum(weights * s, -1) - weights * s
    inter = 2 * (weights * (s * w_before - ws_before)).sum(-1)
    intra = (weights ** 2 * delta).sum(-1) / 3
    return inter + intra


# ---------------------------------------------------------------------------
# registered ops for gradient checks

def _ray_sampler(rng, n=8):
    sigma = torch.tensor(rng.uniform(0, 3, size=(2, n)))
    color = torch.tensor(rng.uniform(0.05, 0.95, size=(2, n, 3)))
    delta = torch.tensor(rng.uniform(0.05, 0.5, size=(2, n)))
    t = torch.cumsum(delta, -1)
    return sigma, color, delta, t


@register("volume_render", _ray_sampler)
def _render_op(sigma, color, delta, t):
    out = render_ray(sigma, color, delta, t)
    return torch.cat([out.color.reshape(-1), out.depth, out.opacity, out.weights.reshape(-1)])


def _composite_sampler(rng):
    sigma, color, delta, t = _ray_sampler(rng)
    sigma_d = torch.tensor(rng.uniform(0, 3, size=(2, 8)))
    color_d = torch.tensor(rng.uniform(0.05, 0.95, size=(2, 8, 3)))
    m = torch.tensor(rng.uniform(0.05, 0.95, size=(2, 8)))
    return sigma, color, sigma_d, color_d, m, delta, t


@register("composite_render", _composite_sampler)
def _composite_op(sigma_s, color_s, sigma_d, color_d, m, delta, t):
    out = composite_render(sigma_s, color_s, sigma_d, color_d, m, delta, t)
    return torch.cat([out.color.reshape(-1), out.depth, out.nonrigidity, out.weights.reshape(-1)])


def _distortion_sampler(rng):
    w = torch.tensor(rng.uniform(0, 0.3, size=(2, 12)))
    delta = torch.tensor(rng.uniform(0.01, 0.1, size=(2, 12)))
    s = torch.cumsum(delta, -1) - delta / 2
    return w, s, delta


register("distortion_loss", _distortion_sampler)(distortion_loss)


def _depth_sampler(rng):
    w = torch.tensor(rng.uniform(0.05, 1, size=(3, 8)))
    t = torch.tensor(np.sort(rng.uniform(1, 5, size=(3, 8)), -1))
    return w, t


@register("render_depth", _depth_sampler)
def _depth_op(w, t):
    return render_depth(w, t)[0]
