import json

import numpy as np
import pytest
import torch

from dynrecon import geometry, synth


def small(name, **kw):
    return synth.preset(name, n_frames=kw.pop("n_frames", 5), width=40, height=30, **kw)


def test_static_flow_matches_unproject_project():
    spec = small("static_orbit")
    taus = np.linspace(0, 1, spec.n_frames)
    fi = synth.render_frame(spec, taus[1])
    fj = synth.render_frame(spec, taus[2])
    flow, _ = synth.correspond(spec, fi, taus[1], taus[2], fj.c2w)
    px = synth.pixel_centers(spec.width, spec.height)
    depth = fi.depth.reshape(-1)
    hit = np.isfinite(depth)
    X = geometry.unproject(torch.tensor(px[hit]), torch.tensor(depth[hit]), torch.tensor(fi.c2w), spec.focal,
                           spec.width / 2, spec.height / 2)
    pj = geometry.project(X, torch.tensor(fj.c2w), spec.focal, spec.width / 2, spec.height / 2)[0].numpy()
    err = np.abs(pj - px[hit] - flow.reshape(-1, 2)[hit]).max()
    assert err < 1e-8


def test_rotation_only_flow_is_a_homography():
    spec = small("rotation_only")
    taus = np.linspace(0, 1, spec.n_frames)
    fi = synth.render_frame(spec, taus[0])
    fj = synth.render_frame(spec, taus[3])
    assert np.allclose(fi.c2w[:3, 3], fj.c2w[:3, 3])
    flow, _ = synth.correspond(spec, fi, taus[0], taus[3], fj.c2w)
    px = synth.pixel_centers(spec.width, spec.height)
    hit = np.isfinite(fi.depth.reshape(-1))
    # pixel -> camera direction with +y up and -z forward, and its inverse
    f, cx, cy = spec.focal, spec.width / 2, spec.height / 2
    A = np.array([[1 / f, 0, -cx / f], [0, -1 / f, cy / f], [0, 0, -1.0]])
    H = np.linalg.inv(A) @ fj.c2w[:3, :3].T @ fi.c2w[:3, :3] @ A
    ph = np.c_[px[hit], np.ones(hit.sum())] @ H.T
    mapped = ph[:, :2] / ph[:, 2:]
    assert np.abs(mapped - px[hit] - flow.reshape(-1, 2)[hit]).max() < 1e-8


def test_linear_mover_scene_flow_is_its_step():
    prims = synth._room(0)
    prims.append(synth.Primitive("box", (-0.55, 0.0, 1.3), (0.4, 0.4, 0.4), motion="linear",
                                 displacement=(0.4, 0.0, 0.0)))
    spec = synth.SceneSpec(prims, width=40, height=30, n_frames=5)
    ds = synth.generate(spec)
    sf = ds.gt_sceneflow_fwd[1]
    mask = ds.gt_mask[1]
    assert mask.sum() > 20
    assert np.abs(sf[mask] - np.array([0.1, 0.0, 0.0])).max() < 1e-12
    assert np.abs(sf[~mask]).max() == 0


def test_generator_rejects_intersecting_primitives():
    prims = synth._room(0)
    prims.append(synth.Primitive("sphere", (-1.0, -0.75, 0.0), 0.3))
    with pytest.raises(ValueError, match="intersect"):
        synth.generate(synth.SceneSpec(prims, width=16, height=12, n_frames=3))


def test_dataset_shapes_and_masks():
    ds = synth.generate(small("one_mover"))
    assert ds.frames.shape == (5, 30, 40, 3)
    assert len(ds.flow_fwd) == len(ds.flow_bwd) == 4
    assert ds.mask.any() and not ds.mask.all()
    assert np.array_equal(ds.mask, ds.gt_mask)
    np.testing.assert_allclose(ds.times, np.linspace(0, 1, 5))


def test_disparity_prior_is_affine_in_inverse_depth():
    ds = synth.generate(small("static_orbit"))
    a, b = ds.meta["disparity_affine"]
    ok = np.isfinite(ds.gt_depth)
    np.testing.assert_allclose(ds.disparity[ok], a / ds.gt_depth[ok].astype(np.float64) + b, rtol=1e-5)


def test_spec_json_round_trip():
    spec = small("two_movers")
    back = synth.SceneSpec.from_dict(json.loads(spec.to_json()))
    a, b = synth.render_frame(spec, 0.3), synth.render_frame(back, 0.3)
    assert np.array_equal(a.rgb, b.rgb)


def test_orbit_looks_at_centre():
    traj = synth.Trajectory("orbit")
    for tau in (0.0, 0.5, 1.0):
        P = traj.c2w(tau)
        to_centre = np.asarray(traj.center) - P[:3, 3]
        fwd = -P[:3, 2]
        assert np.allclose(np.cross(fwd, to_centre / np.linalg.norm(to_centre)), 0, atol=1e-12)
        assert np.allclose(P[:3, :3].T @ P[:3, :3], np.eye(3), atol=1e-12)


def test_oracle_empty_and_opaque():
    rgb, _, acc, _ = synth.oracle_render(np.zeros(6), np.full((6, 3), 0.3), np.full(6, 0.1),
                                         background=(0.2, 0.4, 0.6))
    np.testing.assert_allclose(rgb, [0.2, 0.4, 0.6])
    assert acc == 0
    sigma = np.array([0.0, 0.0, 1e6, 0.0])
    color = np.array([[0.9, 0.9, 0.9], [0.9, 0.9, 0.9], [0.1, 0.5, 0.3], [0.7, 0.7, 0.7]])
    rgb, depth, acc, _ = synth.oracle_render(sigma, color, np.full(4, 0.5), t=np.arange(4.0))
    np.testing.assert_allclose(rgb, [0.1, 0.5, 0.3])
    assert depth == pytest.approx(2.0)
