"""Image and trajectory metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, max_val: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(max_val ** 2 / mse))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0, k1: float = 0.01, k2: float = 0.03,
         win: int = 11, sigma: float = 1.5) -> float:
    """Mean SSIM over valid window positions (and channels for colour images)."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range, k1, k2, win, sigma) for c in range(a.shape[2])]))
    if min(a.shape) < win:
        raise ValueError(f"image {a.shape} smaller than the {win}x{win} window")
    g = gaussian_window(win, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# trajectories (camera-to-world 4x4 arrays)

@dataclass
class TrajectoryMetrics:
    ate: float
    rpe_trans: float
    rpe_rot: float


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True):
    """Closed-form (s, R, t) minimizing ``|dst - (s R src + t)|^2``.

    With no spread in ``src`` the scale falls back to 1.
    """
    src = np.asarray(src, np.float64)
    dst = np.asarray(dst, np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    if with_scale and var_s > 1e-12:
        s = float(np.trace(np.diag(D) @ S) / var_s)
    else:
        s = 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


def align_trajectory(est: np.ndarray, gt: np.ndarray, mode: str = "sim3"):
    """Apply the best ``mode`` alignment ('sim3', 'se3', 'none') of est onto gt.

    Returns (aligned est poses, scale). Rotations are rotated, translations
    similarity-transformed.
    """
    est = np.asarray(est, np.float64)
    gt = np.asarray(gt, np.float64)
    if len(est) != len(gt):
        raise ValueError(f"trajectory lengths differ: {len(est)} vs {len(gt)}")
    if mode == "none":
        return est.copy(), 1.0
    if mode == "sim3" and len(est) < 3:
        raise ValueError("similarity alignment needs >= 3 poses")
    s, R, t = umeyama(est[:, :3, 3], gt[:, :3, 3], with_scale=(mode == "sim3"))
    out = est.copy()
    out[:, :3, :3] = R @ est[:, :3, :3]
    out[:, :3, 3] = s * est[:, :3, 3] @ R.T + t
    return out, s


def ate(est: np.ndarray, gt: np.ndarray, align: str = "sim3") -> float:
    """RMSE of camera-centre residuals after alignment."""
    aligned, _ = align_trajectory(est, gt, align)
    res = aligned[:, :3, 3] - np.asarray(gt, np.float64)[:, :3, 3]
    return float(np.sqrt(np.mean(np.sum(res ** 2, 1))))


def _relative(P: np.ndarray, delta: int) -> np.ndarray:
    return np.linalg.inv(P[:-delta]) @ P[delta:]


def rotation_angle_deg(R: np.ndarray) -> np.ndarray:
    c = (np.trace(R, axis1=-2, axis2=-1) - 1) / 2
    return np.degrees(np.arccos(np.clip(c, -1.0, 1.0)))


def rpe(est: np.ndarray, gt: np.ndarray, delta: int = 1, align: str = "sim3") -> tuple[float, float]:
    """(translation RMSE, rotation RMSE in degrees) of ``delta``-step relative motions."""
    est = np.asarray(est, np.float64)
    gt = np.asarray(gt, np.float64)
    if len(est) < 2 or len(est) != len(gt):
        raise ValueError("rpe needs two equal-length trajectories of >= 2 poses")
    scale = align_trajectory(est, gt, align)[1] if (align != "none" and len(est) >= 3) else 1.0
    est = est.copy()
    est[:, :3, 3] *= scale
    err = np.linalg.inv(_relative(gt, delta)) @ _relative(est, delta)
    trans = np.sqrt(np.mean(np.sum(err[:, :3, 3] ** 2, 1)))
    rot = np.sqrt(np.mean(rotation_angle_deg(err[:, :3, :3]) ** 2))
    return float(trans), float(rot)


def trajectory_metrics(est: np.ndarray, gt: np.ndarray, align: str = "sim3") -> TrajectoryMetrics:
    t, r = rpe(est, gt, 1, align)
    return TrajectoryMetrics(ate(est, gt, align), t, r)


def trajectory_extent(poses: np.ndarray) -> float:
    """Diagonal of the bounding box of the camera centres."""
    c = np.asarray(poses)[:, :3, 3]
    return float(np.linalg.norm(c.max(0) - c.min(0)))
