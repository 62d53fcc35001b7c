"""Epipolar motion masks from dense optical flow.

A fundamental matrix is fitted to flow correspondences with RANSAC around
the normalized eight-point algorithm; pixels whose Sampson distance to the
epipolar geometry exceeds a threshold are flagged as moving and unioned with
any instance mask.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)


class DegenerateError(ValueError):
    pass


@dataclass
class FundamentalMatrix:
    matrix: np.ndarray
    # True when the correspondences admit a family of solutions (no baseline)
    degenerate_translation: bool = False


def canonicalize(F: np.ndarray) -> np.ndarray:
    F = F / np.linalg.norm(F)
    k = np.argmax(np.abs(F))
    return F if F.flat[k] > 0 else -F


def _hartley(x: np.ndarray):
    c = x.mean(0)
    d = np.sqrt(((x - c) ** 2).sum(1)).mean()
    s = np.sqrt(2) / d
    T = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
    xh = np.c_[x, np.ones(len(x))] @ T.T
    return xh, T


def _check_spread(x: np.ndarray, name: str):
    centered = x - x.mean(0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] < 1e-9 or sv[1] < 1e-9 * max(1.0, sv[0]):
        raise DegenerateError(f"{name} points are coincident or collinear")


def eight_point(x1: np.ndarray, x2: np.ndarray) -> FundamentalMatrix:
    """Normalized eight-point estimate with rank-2 enforcement.

    ``x1``, ``x2``: (n, 2) pixel coordinates with ``x2^T F x1 = 0``.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    if len(x1) < 8 or len(x1) != len(x2):
        raise ValueError(f"need >= 8 matched correspondences, got {len(x1)}/{len(x2)}")
    _check_spread(x1, "first-view")
    _check_spread(x2, "second-view")
    p1, T1 = _hartley(x1)
    p2, T2 = _hartley(x2)
    A = np.column_stack([
        p2[:, 0] * p1[:, 0], p2[:, 0] * p1[:, 1], p2[:, 0],
        p2[:, 1] * p1[:, 0], p2[:, 1] * p1[:, 1], p2[:, 1],
        p1[:, 0], p1[:, 1], np.ones(len(p1)),
    ])
    _, s, Vt = np.linalg.svd(A)
    Fn = Vt[-1].reshape(3, 3)
    degenerate = len(s) >= 9 and s[-2] < 1e-8 * s[0]
    U, S, Vt2 = np.linalg.svd(Fn)
    Fn = U @ np.diag([S[0], S[1], 0.0]) @ Vt2
    return FundamentalMatrix(canonicalize(T2.T @ Fn @ T1), degenerate)


def algebraic_residual(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    h1 = np.c_[x1, np.ones(len(x1))]
    h2 = np.c_[x2, np.ones(len(x2))]
    return np.einsum("ni,ij,nj->n", h2, F, h1)


def sampson(F: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """First-order squared geometric error of each correspondence (coordinate units^2)."""
    x1 = np.asarray(x1, dtype=np.float64).reshape(-1, 2)
    x2 = np.asarray(x2, dtype=np.float64).reshape(-1, 2)
    h1 = np.c_[x1, np.ones(len(x1))]
    h2 = np.c_[x2, np.ones(len(x2))]
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    num = np.einsum("ni,ni->n", h2, Fx1) ** 2
    den = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), np.inf)
    return out


def ransac_fundamental(x1: np.ndarray, x2: np.ndarray, iters: int = 500, threshold: float = 1.0,
                       seed: int = 0):
    """Robust fit; inliers have ``sqrt(sampson) < threshold`` pixels.

    Returns ``(FundamentalMatrix, inlier_mask)`` after refitting on the best
    consensus set.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    n = len(x1)
    if n < 8:
        raise ValueError(f"need >= 8 correspondences, got {n}")
    rng = np.random.default_rng(seed)
    thr2 = threshold ** 2
    best = None
    best_count = -1
    for _ in range(iters):
        idx = rng.choice(n, 8, replace=False)
        try:
            F = eight_point(x1[idx], x2[idx]).matrix
        except DegenerateError:
            continue
        inl = sampson(F, x1, x2) < thr2
        count = int(inl.sum())
        if count > best_count:
            best, best_count = inl, count
            if count == n:
                break
    if best is None or best_count < 8:
        raise DegenerateError(f"RANSAC consensus too small ({max(best_count, 0)} < 8)")
    inliers = best
    for _ in range(3):
        fit = eight_point(x1[inliers], x2[inliers])
        refined = sampson(fit.matrix, x1, x2) < thr2
        if refined.sum() < 8 or np.array_equal(refined, inliers):
            break
        inliers = refined
    return fit, inliers


def pixel_grid(height: int, width: int, stride: int = 1) -> np.ndarray:
    """Centres of every ``stride``-th pixel as (rows, cols, 2) (u, v) coordinates."""
    v, u = np.mgrid[0:height:stride, 0:width:stride]
    return np.stack([u + 0.5, v + 0.5], -1).astype(np.float64)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def normalized_sampson_map(flow: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Dense Sampson distance with the image diagonal rescaled to 1000 units."""
    h, w = flow.shape[:2]
    grid = pixel_grid(h, w)
    d = sampson(F, grid.reshape(-1, 2), (grid + flow).reshape(-1, 2)).reshape(h, w)
    scale = 1000.0 / np.hypot(w, h)
    return d * scale ** 2


# Inlier threshold (pixels) when fitting F for dense masks. Small inter-frame
# baselines let a wrong F absorb slowly moving objects at looser thresholds.
MASK_RANSAC_THRESHOLD = 0.05


def epipolar_mask(flow: np.ndarray, tau: float = 1.0, stride: int = 4, iters: int = 500,
                  ransac_threshold: float = MASK_RANSAC_THRESHOLD, seed: int = 0, valid: np.ndarray | None = None):
    """Pixels whose flow violates the dominant epipolar geometry; None if RANSAC fails."""
    h, w = flow.shape[:2]
    grid = pixel_grid(h, w, stride)
    sub = flow[::stride, ::stride]
    ok = np.isfinite(sub).all(-1)
    if valid is not None:
        ok &= valid[::stride, ::stride]
    x1 = grid[ok]
    x2 = x1 + sub[ok]
    try:
        fit, _ = ransac_fundamental(x1, x2, iters=iters, threshold=ransac_threshold, seed=seed)
    except (DegenerateError, ValueError) as exc:
        log.warning("fundamental matrix estimation failed: %s", exc)
        return None
    return normalized_sampson_map(flow, fit.matrix) > tau


def motion_mask(flows: list[np.ndarray], instance_mask: np.ndarray | None = None, tau: float = 1.0,
                dilation: int = 3, stride: int = 4, iters: int = 500, seed: int = 0,
                ransac_threshold: float = MASK_RANSAC_THRESHOLD) -> np.ndarray:
    """Binary motion mask of one frame from its available flows (forward and/or backward).

    A pixel is dynamic if any flow direction flags it; the dilated epipolar
    mask is unioned with ``instance_mask``. When RANSAC fails for every flow
    the instance mask alone is returned.
    """
    if not flows:
        raise ValueError("need at least one flow field")
    h, w = flows[0].shape[:2]
    epi = np.zeros((h, w), dtype=bool)
    any_ok = False
    for k, flow in enumerate(flows):
        m = epipolar_mask(flow, tau=tau, stride=stride, iters=iters, ransac_threshold=ransac_threshold, seed=seed + k)
        if m is None:
            continue
        any_ok = True
        epi |= m
    if not any_ok:
        log.warning("epipolar masking failed for all flows; using instance mask only")
    elif dilation > 0:
        epi = ndimage.binary_dilation(epi, structure=disk(dilation))
    inst = np.zeros((h, w), dtype=bool) if instance_mask is None else np.asarray(instance_mask, dtype=bool)
    return epi | inst


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0
