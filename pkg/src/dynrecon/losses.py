"""Training objectives for the static branch, the dynamic branch and their total.

Masks follow the prior convention: ``M = 1`` marks a dynamic pixel. Pixel
errors are in pixels, depths are camera-space z, disparity is ``1 / z``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import geometry
from .config import LossWeights
from .diffcore import register


def _empty_like(x: torch.Tensor) -> torch.Tensor:
    # zero that stays attached to the graph
    return x.sum() * 0


def photometric(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over rays and channels."""
    if pred.numel() == 0:
        return _empty_like(pred)
    return ((pred - target) ** 2).mean()


def photometric_static(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """MSE over rays with ``mask == 0`` only; 0 when the batch has none.

    Dynamic rays are dropped by indexing, so their values never enter the
    arithmetic.
    """
    keep = mask.reshape(-1) < 0.5
    if not bool(keep.any()):
        return _empty_like(pred)
    return photometric(pred.reshape(-1, pred.shape[-1])[keep], target.reshape(-1, target.shape[-1])[keep])


def surface_point(weights: torch.Tensor, points: torch.Tensor, floor: float = 1e-3):
    """Weight-averaged sample position ``(..., N, 3) -> (..., 3)`` and validity."""
    acc = weights.sum(-1)
    p = (weights[..., None] * points).sum(-2) / acc.clamp_min(1e-10)[..., None]
    return p, acc > floor


def reprojection_loss(points: torch.Tensor, target_px: torch.Tensor, c2w_j: torch.Tensor, focal, cx, cy,
                      valid: torch.Tensor | None = None, scene_flow: torch.Tensor | None = None):
    """Mean L1 pixel distance between projected points and flow targets.

    ``scene_flow`` (dynamic branch) displaces the points before projection.
    Returns ``(loss, n_behind)``; points behind camera ``j`` are excluded.
    """
    if scene_flow is not None:
        points = points + scene_flow
    px, depth, front = geometry.project(points, c2w_j, focal, cx, cy)
    ok = front if valid is None else front & valid
    n_behind = int((~front).sum())
    if not bool(ok.any()):
        return _empty_like(points), n_behind
    err = (px - target_px).abs().sum(-1)
    return err[ok].mean(), n_behind


def disparity_loss(points_a: torch.Tensor, points_b: torch.Tensor, c2w: torch.Tensor,
                   valid: torch.Tensor | None = None, eps: float = 1e-6) -> torch.Tensor:
    """Mean ``|1/z_a - 1/z_b|`` with both point sets expressed in camera ``c2w``."""
    za = -geometry.world_to_camera(points_a, c2w)[..., 2]
    zb = -geometry.world_to_camera(points_b, c2w)[..., 2]
    ok = (za > eps) & (zb > eps)
    if valid is not None:
        ok = ok & valid
    if not bool(ok.any()):
        return _empty_like(points_a)
    return (1 / za[ok] - 1 / zb[ok]).abs().mean()


def affine_align(pred: torch.Tensor, prior: torch.Tensor, rel_tol: float = 1e-12, nonneg_scale: bool = False):
    """Closed-form least-squares (scale, shift) mapping ``pred`` onto ``prior``.

    A constant ``pred`` makes the normal equations singular; the alignment
    then uses the shift alone. With ``nonneg_scale`` a prior that orders
    depths the other way round is not explained by flipping its sign.
    """
    n = pred.shape[-1]
    mx = pred.mean(-1, keepdim=True)
    my = prior.mean(-1, keepdim=True)
    dx = pred - mx
    var = (dx * dx).sum(-1, keepdim=True)
    degenerate = var <= rel_tol * (pred * pred).sum(-1, keepdim=True).clamp_min(1e-30)
    cov = (dx * (prior - my)).sum(-1, keepdim=True)
    scale = torch.where(degenerate, torch.zeros_like(var), cov / torch.where(degenerate, torch.ones_like(var), var))
    if nonneg_scale:
        scale = scale.clamp_min(0)
    shift = torch.where(degenerate, my, my - scale * mx)
    return scale, shift


def monodepth_loss(pred_disp: torch.Tensor, prior_disp: torch.Tensor, valid: torch.Tensor | None = None,
                   groups: torch.Tensor | None = None, nonneg_scale: bool = False):
    """Scale- and shift-invariant squared error on disparities.

    Each group (typically: one frame) is aligned separately. Returns
    ``(loss, aligned)`` where ``aligned`` is False when fewer than two valid
    pixels were available anywhere.
    """
    pred_disp = pred_disp.reshape(-1)
    prior_disp = prior_disp.reshape(-1)
    ok = torch.ones_like(pred_disp, dtype=torch.bool) if valid is None else valid.reshape(-1)
    if groups is None:
        groups = torch.zeros_like(pred_disp, dtype=torch.long)
    groups = groups.reshape(-1)
    residuals = []
    for g in torch.unique(groups[ok]).tolist():
        sel = ok & (groups == g)
        if int(sel.sum()) < 2:
            continue
        x, y = pred_disp[sel], prior_disp[sel]
        s, b = affine_align(x, y, nonneg_scale=nonneg_scale)
        residuals.append(s * x + b - y)
    if not residuals:
        return _empty_like(pred_disp), False
    r = torch.cat(residuals)
    return (r * r).mean(), True


def scene_flow_reg(s_fwd: torch.Tensor, s_bwd: torch.Tensor) -> torch.Tensor:
    """Mean over points of ``|S_f + S_b|_1 + |S_f|_1 + |S_b|_1``."""
    if s_fwd.numel() == 0:
        return _empty_like(s_fwd)
    per = (s_fwd + s_bwd).abs().sum(-1) + s_fwd.abs().sum(-1) + s_bwd.abs().sum(-1)
    return per.mean()


def mask_loss(rendered: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    if rendered.numel() == 0:
        return _empty_like(rendered)
    return (rendered - prior).abs().mean()


def anneal(step: int, horizon: int, weight: float, floor: float = 0.1) -> float:
    """Linear decay of ``weight`` to ``floor * weight`` at ``horizon`` steps."""
    return weight * max(floor, 1 - step / max(horizon, 1))


# weight attribute of LossWeights for each weighted term; None = unit weight
TERMS = {
    "photo": None,
    "photo_s": None,
    "reproj_s": "reproj_s",
    "disp_s": "disp_s",
    "monodepth_s": "monodepth_s",
    "photo_d": None,
    "reproj_d": "reproj_d",
    "disp_d": "disp_d",
    "monodepth_d": "monodepth_d",
    "sf_reg": "sf_reg",
    "mask_d": "mask_d",
    "distortion": "distortion",
}
ANNEALED = {"reproj_s", "disp_s", "monodepth_s", "reproj_d", "disp_d", "monodepth_d"}


def term_weight(name: str, weights: LossWeights, step: int) -> float:
    attr = TERMS[name]
    if attr is None:
        return 1.0
    w = getattr(weights, attr)
    if name in ANNEALED:
        w = anneal(step, weights.anneal_horizon, w, weights.anneal_floor)
    return w


def total_loss(terms: dict[str, torch.Tensor], weights: LossWeights, step: int):
    """Weighted sum of whichever terms are present.

    Full-composite photometric + static total + dynamic total + distortion.
    Returns ``(total, breakdown)`` with the unweighted value of each term and
    the weighted static/dynamic totals.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = None
    breakdown: dict[str, float] = {}
    static_total = dynamic_total = 0.0
    for name in TERMS:
        if name not in terms:
            continue
        value = terms[name]
        contrib = term_weight(name, weights, step) * value
        total = contrib if total is None else total + contrib
        breakdown[name] = float(value.detach())
        if name.endswith("_s"):
            static_total += float(contrib.detach())
        elif name.endswith("_d") or name == "sf_reg":
            dynamic_total += float(contrib.detach())
    if total is None:
        total = torch.zeros(())
    breakdown["static_total"] = static_total
    breakdown["dynamic_total"] = dynamic_total
    breakdown["total"] = float(total.detach())
    return total, breakdown


def format_breakdown(step: int, breakdown: dict[str, float]) -> str:
    return f"step={step} " + " ".join(f"{k}={v:.6g}" for k, v in breakdown.items())


# ---------------------------------------------------------------------------
# registered ops for gradient checks

def _photo_sampler(rng):
    pred = torch.tensor(rng.uniform(0, 1, size=(6, 3)))
    target = torch.tensor(rng.uniform(0, 1, size=(6, 3)))
    mask = torch.tensor((rng.uniform(size=6) < 0.4).astype(float))
    mask[0] = 0
    return pred, target, mask


register("photometric_static", _photo_sampler)(photometric_static)


def _surface_sampler(rng):
    w = torch.tensor(rng.uniform(0.05, 0.5, size=(3, 6)))
    pts = torch.tensor(rng.normal(size=(3, 6, 3)))
    return w, pts


@register("surface_point", _surface_sampler)
def _surface_op(w, pts):
    return surface_point(w, pts)[0]


def _reproj_sampler(rng):
    r = torch.tensor(rng.normal(size=3) * 0.2)
    t = torch.tensor(rng.normal(size=3) * 0.3)
    f = torch.tensor(rng.uniform(50, 90))
    c2w = geometry.pose_matrix(r, t)
    px = torch.tensor(rng.uniform(5, 59, size=(5, 2)))
    pts = geometry.unproject(px, torch.tensor(rng.uniform(2, 5, size=5)), c2w, f, 32.0, 24.0)
    # targets far from the projections so the L1 kink is never straddled
    target = px + torch.tensor(rng.choice([-1, 1], size=(5, 2)) * rng.uniform(2, 4, size=(5, 2)))
    sf = torch.tensor(rng.normal(size=(5, 3)) * 0.05)
    return pts, target, r, t, f, sf


@register("reprojection_loss", _reproj_sampler)
def _reproj_op(pts, target, r, t, f, sf):
    return reprojection_loss(pts, target, geometry.pose_matrix(r, t), f, 32.0, 24.0, scene_flow=sf)[0]


def _disp_sampler(rng):
    a = torch.tensor(rng.normal(size=(5, 3)) * 0.5 + np.array([0, 0, -3.0]))
    b = a + torch.tensor(rng.choice([-1, 1], size=(5, 3)) * rng.uniform(0.3, 0.6, size=(5, 3)))
    r = torch.tensor(rng.normal(size=3) * 0.05)
    t = torch.tensor(rng.normal(size=3) * 0.05)
    return a, b, r, t


@register("disparity_loss", _disp_sampler)
def _disp_op(a, b, r, t):
    return disparity_loss(a, b, geometry.pose_matrix(r, t))


def _mono_sampler(rng):
    return torch.tensor(rng.uniform(0.2, 1, size=12)), torch.tensor(rng.uniform(0.2, 1, size=12))


@register("monodepth_loss", _mono_sampler)
def _mono_op(pred, prior):
    return monodepth_loss(pred, prior)[0]


def _sf_sampler(rng):
    return (torch.tensor(rng.choice([-1, 1], size=(4, 3)) * rng.uniform(0.2, 1, size=(4, 3))),
            torch.tensor(rng.choice([-1, 1], size=(4, 3)) * rng.uniform(1.5, 2, size=(4, 3))))


register("scene_flow_reg", _sf_sampler)(scene_flow_reg)


def _mask_sampler(rng):
    prior = torch.tensor((rng.uniform(size=8) < 0.5).astype(float))
    rendered = torch.where(prior > 0.5, 0.6, 0.4) + torch.tensor(rng.uniform(-0.1, 0.1, size=8))
    return rendered, prior


register("mask_loss", _mask_sampler)(mask_loss)
