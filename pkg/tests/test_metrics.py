import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from dynrecon import metrics


def naive_ssim(a, b, win=11, sigma=1.5, k1=0.01, k2=0.03):
    """Gaussian-window SSIM with explicit loops over window positions."""
    x = np.arange(win) - (win - 1) / 2
    g1 = np.exp(-x ** 2 / (2 * sigma ** 2))
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for i in range(a.shape[0] - win + 1):
        for j in range(a.shape[1] - win + 1):
            pa, pb = a[i:i + win, j:j + win], b[i:i + win, j:j + win]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def orbit(n=10, seed=0):
    rng = np.random.default_rng(seed)
    P = np.tile(np.eye(4), (n, 1, 1))
    P[:, :3, :3] = Rotation.from_rotvec(rng.normal(scale=0.3, size=(n, 3))).as_matrix()
    P[:, :3, 3] = rng.normal(size=(n, 3))
    return P


def similarity(P, s, R, t):
    out = P.copy()
    out[:, :3, :3] = R @ P[:, :3, :3]
    out[:, :3, 3] = s * P[:, :3, 3] @ R.T + t
    return out


def test_psnr_examples():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert metrics.psnr(a, a) == 99.0
    assert metrics.psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)


def test_ssim_identical_is_one():
    a = np.random.default_rng(1).uniform(size=(20, 24, 3))
    assert metrics.ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(18, 21))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert abs(metrics.ssim(a, b) - naive_ssim(a, b)) < 1e-9


def test_ssim_symmetric_exactly():
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(2, 16, 16, 3))
    assert metrics.ssim(a, b) == metrics.ssim(b, a)


def test_ssim_rejects_tiny_or_mismatched():
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((5, 5)), np.zeros((5, 5)))
    with pytest.raises(ValueError):
        metrics.ssim(np.zeros((12, 12)), np.zeros((12, 13)))


def test_identical_trajectories_are_zero():
    P = orbit()
    tm = metrics.trajectory_metrics(P, P)
    assert tm.ate < 1e-12 and tm.rpe_trans < 1e-12 and tm.rpe_rot < 1e-5


def test_similarity_copy_has_zero_ate():
    P = orbit()
    R = Rotation.from_rotvec([0.3, -1.2, 0.5]).as_matrix()
    Q = similarity(P, 2.5, R, np.array([1.0, -3.0, 0.5]))
    assert metrics.ate(Q, P) < 1e-10
    t, r = metrics.rpe(Q, P)
    assert t < 1e-10 and r < 1e-5


def test_single_displaced_pose_ate_without_alignment():
    gt = orbit(10)
    est = gt.copy()
    est[4, :3, 3] += np.array([0.0, 0.3, 0.0])
    assert abs(metrics.ate(est, gt, align="none") - 0.3 / math.sqrt(10)) < 1e-9


def test_rpe_rotation_of_one_twisted_step():
    gt = orbit(6)
    est = gt.copy()
    # rotating every pose from index 3 on by the same world rotation about camera 3's
    # centre changes only the relative motion 2 -> 3
    R = Rotation.from_rotvec([0, 0, math.radians(2.0)]).as_matrix()
    c = gt[3, :3, 3]
    est[3:, :3, :3] = R @ gt[3:, :3, :3]
    est[3:, :3, 3] = (gt[3:, :3, 3] - c) @ R.T + c
    _, rot = metrics.rpe(est, gt, align="none")
    assert rot == pytest.approx(2.0 / math.sqrt(5), rel=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_rigid_motion_of_both_leaves_metrics_unchanged(seed):
    rng = np.random.default_rng(seed)
    gt = orbit(8, seed)
    est = orbit(8, seed + 1)
    R = Rotation.random(random_state=seed).as_matrix()
    t = rng.normal(size=3)
    base = metrics.trajectory_metrics(est, gt)
    moved = metrics.trajectory_metrics(similarity(est, 1.0, R, t), similarity(gt, 1.0, R, t))
    assert abs(base.ate - moved.ate) < 1e-10
    assert abs(base.rpe_trans - moved.rpe_trans) < 1e-10
    assert abs(base.rpe_rot - moved.rpe_rot) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 5.0))
def test_similarity_on_estimate_is_absorbed(seed, s):
    rng = np.random.default_rng(seed)
    gt = orbit(8, seed)
    est = orbit(8, seed + 1)
    R = Rotation.random(random_state=seed).as_matrix()
    base = metrics.trajectory_metrics(est, gt)
    moved = metrics.trajectory_metrics(similarity(est, s, R, rng.normal(size=3)), gt)
    assert abs(base.ate - moved.ate) < 1e-10
    assert abs(base.rpe_trans - moved.rpe_trans) < 1e-10
    assert abs(base.rpe_rot - moved.rpe_rot) < 1e-10


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.2, 5.0))
def test_common_scale_scales_distances_only(seed, s):
    gt = orbit(8, seed)
    est = orbit(8, seed + 1)
    base = metrics.trajectory_metrics(est, gt)
    I = np.eye(3)
    moved = metrics.trajectory_metrics(similarity(est, s, I, np.zeros(3)), similarity(gt, s, I, np.zeros(3)))
    assert abs(moved.ate - s * base.ate) < 1e-10
    assert abs(moved.rpe_trans - s * base.rpe_trans) < 1e-10
    assert abs(moved.rpe_rot - base.rpe_rot) < 1e-10


def test_degenerate_trajectory_uses_unit_scale():
    gt = orbit(5)
    est = np.tile(np.eye(4), (5, 1, 1))
    aligned, s = metrics.align_trajectory(est, gt)
    assert s == 1.0
    assert np.isfinite(aligned).all()


def test_length_mismatch_raises():
    with pytest.raises(ValueError):
        metrics.ate(orbit(5), orbit(6))


def test_extent_is_bounding_diagonal():
    P = np.tile(np.eye(4), (3, 1, 1))
    P[:, :3, 3] = [[0, 0, 0], [3, 0, 0], [0, 4, 0]]
    assert metrics.trajectory_extent(P) == pytest.approx(5.0)
