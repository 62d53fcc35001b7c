import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dynrecon import synth
from dynrecon.rendering import (alpha, composite_render, distortion_loss, intervals, render_depth, render_ray,
                                sample_along_ray, transmittance)


def random_ray(rng, n):
    sigma = rng.uniform(0, 4, n) * (rng.random(n) < 0.7)
    color = rng.uniform(0, 1, (n, 3))
    delta = rng.uniform(0.01, 0.3, n)
    return sigma, color, delta, np.cumsum(delta)


def distortion_oracle(w, s, d):
    n = len(w)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += w[i] * w[j] * abs(s[i] - s[j])
    return total + sum(w[i] ** 2 * d[i] for i in range(n)) / 3


def test_matches_loop_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(2, 40))
        sigma, color, delta, t = random_ray(rng, n)
        bg = rng.uniform(0, 1, 3)
        out = render_ray(torch.tensor(sigma), torch.tensor(color), torch.tensor(delta), torch.tensor(t), torch.tensor(bg))
        rgb, depth, acc, w = synth.oracle_render(sigma, color, delta, t, bg)
        assert np.abs(out.color.numpy() - rgb).max() < 1e-12
        assert abs(float(out.depth) - depth) < 1e-10
        assert abs(float(out.opacity) - acc) < 1e-12
        assert np.abs(out.weights.numpy() - w).max() < 1e-12


def test_empty_space_shows_background():
    n = 8
    out = render_ray(torch.zeros(n), torch.rand(n, 3), torch.full((n,), 0.1), None, torch.tensor([0.2, 0.4, 0.6]))
    assert torch.equal(out.color, torch.tensor([0.2, 0.4, 0.6]))
    assert float(out.opacity) == 0.0


def test_opaque_wall_shows_its_colour():
    sigma = torch.tensor([0.0, 0.0, 1e6, 0.0])
    color = torch.tensor([[1.0, 0, 0], [0, 1.0, 0], [0.3, 0.2, 0.1], [0, 0, 1.0]])
    t = torch.tensor([1.0, 2.0, 3.0, 4.0])
    out = render_ray(sigma, color, torch.full((4,), 0.5), t, torch.ones(3))
    assert torch.allclose(out.color, torch.tensor([0.3, 0.2, 0.1]))
    assert abs(float(out.depth) - 3.0) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_weights_form_subprobability(seed):
    rng = np.random.default_rng(seed)
    sigma, color, delta, t = random_ray(rng, 16)
    out = render_ray(torch.tensor(sigma), torch.tensor(color), torch.tensor(delta), torch.tensor(t))
    assert (out.weights >= 0).all()
    assert float(out.opacity) <= 1 + 1e-12
    T = out.transmittance
    assert float(T[0]) == 1.0 and (T[1:] <= T[:-1] + 1e-15).all()
    # exclusive cumprod equals exp(-optical depth before the sample)
    optical = np.concatenate([[0.0], np.cumsum(sigma * delta)[:-1]])
    assert np.allclose(T.numpy(), np.exp(-optical), atol=1e-12)


def test_composite_matches_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(2, 30))
        ss, cs, delta, t = random_ray(rng, n)
        sd, cd, _, _ = random_ray(rng, n)
        m = rng.uniform(0, 1, n)
        out = composite_render(*map(torch.tensor, (ss, cs, sd, cd, m, delta)))
        rgb, mask = synth.oracle_composite(ss, cs, sd, cd, m, delta)
        assert np.abs(out.color.numpy() - rgb).max() < 1e-12
        assert abs(float(out.nonrigidity) - mask) < 1e-12


@pytest.mark.parametrize("mval", [0.0, 1.0])
def test_composite_reduces_bitwise(mval, rng):
    ss, cs, delta, t = random_ray(rng, 24)
    sd, cd, _, _ = random_ray(rng, 24)
    args = [torch.tensor(a) for a in (ss, cs, sd, cd)]
    m = torch.full((24,), mval)
    out = composite_render(*args, m, torch.tensor(delta), torch.tensor(t), torch.ones(3))
    single = render_ray(args[2], args[3], torch.tensor(delta), torch.tensor(t), torch.ones(3)) if mval == 1 else \
        render_ray(args[0], args[1], torch.tensor(delta), torch.tensor(t), torch.ones(3))
    assert torch.equal(out.color, single.color)
    assert torch.equal(out.weights, single.weights)
    assert torch.equal(out.depth, single.depth)


def test_composite_separate_dynamic_intervals_default():
    g = np.random.default_rng(3)
    ss, cs, delta, t = random_ray(g, 10)
    sd, cd, _, _ = random_ray(g, 10)
    m = g.uniform(0, 1, 10)
    a = composite_render(*map(torch.tensor, (ss, cs, sd, cd, m, delta)))
    b = composite_render(*map(torch.tensor, (ss, cs, sd, cd, m, delta)), delta_d=torch.tensor(delta))
    assert torch.equal(a.color, b.color)


def test_distortion_matches_quadratic_oracle(rng):
    for _ in range(20):
        n = int(rng.integers(2, 50))
        w = rng.uniform(0, 1, n) / n
        d = rng.uniform(0.01, 0.1, n)
        s = np.cumsum(d) - d / 2
        fast = float(distortion_loss(torch.tensor(w), torch.tensor(s), torch.tensor(d)))
        assert abs(fast - distortion_oracle(w, s, d)) < 1e-12


def test_distortion_prefers_concentrated_weights():
    s = torch.linspace(0.05, 0.95, 10)
    d = torch.full((10,), 0.1)
    spread = torch.full((10,), 0.1)
    peak = torch.zeros(10)
    peak[4] = 1.0
    assert distortion_loss(peak, s, d) < distortion_loss(spread, s, d)


def test_sample_along_ray_midpoints_and_jitter():
    mid = sample_along_ray(0.0, 1.0, 4)
    assert torch.allclose(mid, torch.tensor([0.125, 0.375, 0.625, 0.875]))
    gen = torch.Generator().manual_seed(0)
    jit = sample_along_ray(2.0, 6.0, 16, True, gen, (5,))
    assert jit.shape == (5, 16)
    assert (jit[:, 1:] > jit[:, :-1]).all() and (jit >= 2).all() and (jit <= 6).all()
    lo = torch.arange(16) / 16 * 4 + 2
    assert ((jit >= lo) & (jit <= lo + 0.25)).all()
    with pytest.raises(ValueError):
        sample_along_ray(1.0, 1.0, 4)
    with pytest.raises(ValueError):
        sample_along_ray(0.0, 1.0, 1)


def test_intervals_repeat_last():
    pts = torch.tensor([[0.0, 0, 0], [1.0, 0, 0], [3.0, 0, 0]])
    assert torch.equal(intervals(pts), torch.tensor([1.0, 2.0, 2.0]))


def test_depth_flags_empty_rays():
    d, low = render_depth(torch.zeros(2, 3), torch.ones(2, 3))
    assert low.all() and torch.isfinite(d).all()


def test_alpha_and_transmittance_shapes():
    a = alpha(torch.ones(2, 5), torch.full((2, 5), 0.1))
    assert transmittance(a).shape == (2, 5)
