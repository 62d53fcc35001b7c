import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dynrecon import diffcore
from dynrecon.diffcore import Adam, AdamState, GradientError, Parameter, adam_step, backward, check_gradients

# importing the modules fills the registry
import dynrecon.geometry  # noqa: F401
import dynrecon.losses  # noqa: F401
import dynrecon.rendering  # noqa: F401
import dynrecon.tensorfield  # noqa: F401


def param(values, tag="p"):
    return Parameter(torch.tensor(values, dtype=torch.float64), tag)


def test_backward_of_sum_is_ones():
    p = param([0.3, -1.0, 2.0])
    backward(p.values.sum())
    assert torch.equal(p.gradient, torch.ones(3, dtype=torch.float64))


def test_backward_of_square():
    p = param([1.0, 2.0, 3.0])
    backward((p.values * p.values).sum())
    assert torch.equal(p.gradient, torch.tensor([2.0, 4.0, 6.0]))


def test_unreachable_parameter_keeps_zero_gradient():
    p, q = param([1.0]), param([2.0], "q")
    backward((p.values * 3).sum())
    assert torch.equal(q.gradient, torch.zeros(1, dtype=torch.float64))


def test_backward_rejects_non_scalar():
    p = param([1.0, 2.0])
    with pytest.raises(GradientError):
        backward(p.values * 2)


def test_backward_twice_doubles_gradient(rng):
    p = Parameter(torch.tensor(rng.normal(size=(4, 3))), "p")

    def loss():
        return (torch.sin(p.values) * p.values.exp()).sum()

    backward(loss())
    g1 = p.gradient.clone()
    backward(loss())
    assert torch.equal(p.gradient, 2 * g1)
    p.zero_grad()
    assert torch.equal(p.gradient, torch.zeros_like(g1))


def test_random_composite_matches_finite_differences(rng):
    x = torch.tensor(rng.normal(size=5))
    W = torch.tensor(rng.normal(size=(3, 5)))

    def composite(x, W):
        h = torch.tanh(W @ x)
        h = h * torch.exp(0.3 * h)
        h = torch.log1p(h * h)
        return torch.softmax(h, 0) * (x[:3] ** 2).sum()

    assert check_gradients(composite, [x, W]) < 1e-6


def test_check_gradients_identity_is_exact(rng):
    x = torch.tensor(rng.normal(size=6))
    assert check_gradients(lambda v: v, [x]) == 0.0


def test_check_gradients_reports_non_differentiable_point():
    x = torch.tensor([0.0, 1.0])
    with pytest.raises(GradientError, match="coordinate"):
        check_gradients(lambda v: torch.log(v), [x], h=1e-5)


@pytest.mark.parametrize("name", ["volume_render", "pose_to_ray"])
def test_named_ops_pass_gradient_check(name, rng):
    op = diffcore.REGISTRY[name]
    assert check_gradients(name, op.sampler(rng), op.h) < 1e-5


@pytest.mark.parametrize("name", sorted(diffcore.REGISTRY))
def test_every_registered_op_passes_once(name):
    op = diffcore.REGISTRY[name]
    assert check_gradients(name, op.sampler(np.random.default_rng(7)), op.h) < 1e-5


# ---------------------------------------------------------------------------
# Adam

def test_adam_zero_gradient_leaves_values():
    p = param([1.0, -2.0])
    st_ = AdamState.for_param(p, lr=0.1)
    p.values.grad = torch.zeros(2, dtype=torch.float64)
    adam_step(p, st_)
    assert torch.equal(p.values.detach(), torch.tensor([1.0, -2.0]))
    assert st_.t == 1


def test_adam_first_step_hand_value():
    # m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
    p = param(0.0)
    s = AdamState.for_param(p, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    p.values.grad = torch.tensor(1.0, dtype=torch.float64)
    adam_step(p, s)
    assert abs(float(p.values.detach()) + 0.1) < 1e-6


def test_adam_constant_gradient_is_monotone():
    p = param(0.0)
    s = AdamState.for_param(p, lr=0.1)
    vals = []
    for _ in range(2):
        p.values.grad = torch.tensor(1.0, dtype=torch.float64)
        adam_step(p, s)
        vals.append(float(p.values.detach()))
    assert 0 > vals[0] > vals[1]


def test_adam_skips_non_finite_gradient():
    p = param([1.0, 2.0])
    s = AdamState.for_param(p)
    p.values.grad = torch.tensor([1.0, math.nan], dtype=torch.float64)
    assert adam_step(p, s) is False
    assert s.t == 0
    assert torch.equal(p.values.detach(), torch.tensor([1.0, 2.0]))


def test_adam_state_shape_mismatch():
    p = param([1.0, 2.0])
    s = AdamState.for_param(param([1.0]))
    p.values.grad = torch.ones(2, dtype=torch.float64)
    with pytest.raises(GradientError):
        adam_step(p, s)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_adam_layout_invariance(seed, n_steps):
    g = np.random.default_rng(seed)
    v0 = g.normal(size=(3, 4))
    grads = [g.normal(size=(3, 4)) for _ in range(n_steps)]
    shaped, flat = param(v0.tolist()), param(v0.reshape(-1).tolist())
    ss, sf = AdamState.for_param(shaped, lr=0.05), AdamState.for_param(flat, lr=0.05)
    for gr in grads:
        shaped.values.grad = torch.tensor(gr)
        flat.values.grad = torch.tensor(gr.reshape(-1))
        adam_step(shaped, ss)
        adam_step(flat, sf)
    assert torch.equal(shaped.values.detach().reshape(-1), flat.values.detach())


def test_adam_rejects_double_ownership():
    p = param([1.0])
    opt = Adam([])
    opt.add([p], lr=0.1)
    with pytest.raises(GradientError):
        opt.add([p], lr=0.1)


def test_adam_replace_restarts_moments():
    p = param([1.0, 2.0])
    opt = Adam([])
    opt.add([p], lr=0.1)
    p.values.grad = torch.ones(2, dtype=torch.float64)
    opt.step()
    q = param([0.0, 0.0, 0.0], "p")
    opt.replace("p", q)
    s = opt.states["p"]
    assert s.t == 0 and s.m.shape == (3,) and s.lr == 0.1
    assert opt.params[0] is q
