import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.interpolate import RegularGridInterpolator

from dynrecon.tensorfield import (ColorHead, DeformationHead, SceneFlowHead, TensorField, TimeHeads, encoded_dim,
                                  positional_encode, static_density)


def make_field(res=(4, 5, 6), seed=0, **kw):
    return TensorField(res, density_rank=2, app_rank=3, app_dim=5, generator=torch.Generator().manual_seed(seed),
                       dtype=torch.float64, init_scale=1.0, **kw)


def trilinear_oracle(field, group, pts):
    dense = field.dense(group).detach().numpy()  # (C, nx, ny, nz)
    axes = [np.linspace(lo, hi, n) for lo, hi, n in zip(field.box_min.tolist(), field.box_max.tolist(), dense.shape[1:])]
    return np.stack([RegularGridInterpolator(axes, ch)(pts) for ch in dense], -1)


def test_sample_is_trilinear_interpolation_of_dense_tensor(rng):
    f = make_field(box_min=(-1.0, -2.0, 0.0), box_max=(1.0, 2.0, 3.0))
    pts = rng.uniform([-1, -2, 0], [1, 2, 3], size=(50, 3))
    dens, app, inside = f.sample(torch.tensor(pts))
    assert inside.all()
    assert np.allclose(dens.detach().numpy(), trilinear_oracle(f, "density", pts), atol=1e-12)
    assert np.allclose(app.detach().numpy(), trilinear_oracle(f, "app", pts), atol=1e-12)


def test_outside_box_gives_zero_features():
    f = make_field()
    pts = torch.tensor([[1.5, 0.0, 0.0], [0.0, -1.01, 0.2], [0.1, 0.1, 0.1]])
    dens, app, inside = f.sample(pts)
    assert inside.tolist() == [False, False, True]
    assert torch.all(dens[:2] == 0) and torch.all(app[:2] == 0)
    assert torch.any(dens[2] != 0)


def test_density_features_match_sample(rng):
    f = make_field()
    pts = torch.tensor(rng.uniform(-1.2, 1.2, size=(20, 3)))
    assert torch.equal(f.density_features(pts)[0], f.sample(pts)[0])


def test_factor_count_is_quadratic():
    f = make_field((8, 8, 8))
    n = 9
    assert f.factor_count() == (2 + 3) * 3 * (n * n + n)


@pytest.mark.parametrize("old,new", [((4, 4, 4), (8, 8, 8)), ((3, 5, 2), (6, 15, 8))])
def test_upsample_preserves_old_nodes(old, new):
    f = make_field(old)
    before = f.dense("density").detach().clone()
    before_app = f.dense("app").detach().clone()
    f.upsample(new)
    assert f.resolution == new
    k = [n // o for n, o in zip(new, old)]
    after = f.dense("density").detach()[:, ::k[0], ::k[1], ::k[2]]
    after_app = f.dense("app").detach()[:, ::k[0], ::k[1], ::k[2]]
    assert (after - before).abs().max() < 1e-6
    assert (after_app - before_app).abs().max() < 1e-6


def test_upsample_keeps_the_continuous_function_on_refinement(rng):
    # nested refinement of a trilinear function is exact everywhere along each factor
    f = make_field((4, 4, 4))
    pts = torch.tensor(rng.uniform(-1, 1, size=(30, 3)))
    pts_nodes = torch.tensor(np.stack(np.meshgrid(*[np.linspace(-1, 1, 5)] * 3, indexing="ij"), -1).reshape(-1, 3))
    before = f.sample(pts_nodes)[0]
    f.upsample(8)
    assert (f.sample(pts_nodes)[0] - before).abs().max() < 1e-10
    assert f.sample(pts)[0].shape == (30, 6)


def test_upsample_rejects_shrinking():
    f = make_field((4, 4, 4))
    with pytest.raises(ValueError):
        f.upsample(3)


def test_positional_encoding_layout():
    x = torch.tensor([[0.25, -0.5]])
    e = positional_encode(x, 2, passthrough=True)
    assert e.shape[-1] == encoded_dim(2, 2, True) == 10
    expect = [0.25, -0.5,
              math.sin(math.pi * 0.25), math.sin(2 * math.pi * 0.25), math.sin(-math.pi * 0.5), math.sin(-2 * math.pi * 0.5),
              math.cos(math.pi * 0.25), math.cos(2 * math.pi * 0.25), math.cos(-math.pi * 0.5), math.cos(-2 * math.pi * 0.5)]
    assert torch.allclose(e[0], torch.tensor(expect), atol=1e-15)
    assert positional_encode(x, 0).shape[-1] == 0


def test_static_density_shift():
    z = torch.zeros(1, 4)
    assert torch.allclose(static_density(z), torch.log1p(torch.exp(torch.tensor([-10.0]))))
    assert (static_density(torch.tensor([[50.0]])) - 40).abs() < 1e-9


def test_deformation_starts_as_identity(rng):
    head = DeformationHead(16, 3, 3, 2, max_offset=0.5, dtype=torch.float64)
    xyz = torch.tensor(rng.uniform(-1, 1, size=(10, 3)))
    t = torch.tensor(rng.uniform(0, 1, size=(10, 1)))
    assert torch.equal(head(xyz, t), xyz)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_deformation_and_flow_are_bounded(seed):
    g = np.random.default_rng(seed)
    torch.manual_seed(seed)
    head = DeformationHead(16, 3, 3, 2, max_offset=0.25, dtype=torch.float64)
    flow = SceneFlowHead(16, 3, 3, 2, max_flow=0.3, dtype=torch.float64)
    with torch.no_grad():
        for p in list(head.parameters()) + list(flow.parameters()):
            p.copy_(torch.tensor(g.normal(size=tuple(p.shape)) * 3))
    xyz = torch.tensor(g.uniform(-1, 1, size=(20, 3)))
    t = torch.tensor(g.uniform(0, 1, size=(20, 1)))
    assert (head.offset(xyz, t).abs() <= 0.25).all()
    fw, bw = flow(xyz, t)
    assert (fw.abs() <= 0.3).all() and (bw.abs() <= 0.3).all()


def test_scene_flow_starts_at_zero(rng):
    flow = SceneFlowHead(16, 3, 3, 2, dtype=torch.float64)
    fw, bw = flow(torch.tensor(rng.uniform(-1, 1, size=(5, 3))), torch.full((5, 1), 0.4))
    assert torch.equal(fw, torch.zeros(5, 3, dtype=torch.float64)) and torch.equal(bw, fw)


def test_color_head_range_and_view_dependence(rng):
    torch.manual_seed(0)
    head = ColorHead(6, 16, 3, 2, dtype=torch.float64)
    feats = torch.tensor(rng.normal(size=(1, 6))).expand(2, 6)
    views = torch.tensor([[0.0, 0.0, -1.0], [0.6, 0.0, -0.8]])
    c = head(feats, views)
    assert ((c > 0) & (c < 1)).all()
    assert not torch.equal(c[0], c[1])


def test_time_heads_output_ranges(rng):
    torch.manual_seed(1)
    heads = TimeHeads(6, 5, 16, 2, 2, dtype=torch.float64)
    c, sigma, m = heads(torch.tensor(rng.normal(size=(7, 6))), torch.tensor(rng.normal(size=(7, 5))),
                        torch.tensor(rng.uniform(0, 1, size=(7, 1))))
    assert c.shape == (7, 3) and sigma.shape == (7,) and m.shape == (7,)
    assert (sigma >= 0).all() and ((m > 0) & (m < 1)).all() and ((c > 0) & (c < 1)).all()
