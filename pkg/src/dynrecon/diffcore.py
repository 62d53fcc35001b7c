"""Reverse-mode gradients, Adam, and finite-difference verification.

Reverse accumulation is delegated to ``torch.autograd``: every op in the
package is composed from torch primitives whose analytic partials torch
records per call. The record is released after each backward unless
``retain`` is requested, so nothing survives across training steps.

Ops that must be verified are registered in :data:`REGISTRY` together with
a sampler of valid inputs; :func:`check_gradients` compares their analytic
Jacobian-vector products against central differences.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

log = logging.getLogger(__name__)


class GradientError(RuntimeError):
    pass


@dataclass
class Parameter:
    """An optimizable array with an identity tag."""

    values: torch.Tensor
    tag: str

    def __post_init__(self):
        if not self.values.requires_grad:
            self.values.requires_grad_(True)

    @property
    def gradient(self) -> torch.Tensor:
        g = self.values.grad
        return torch.zeros_like(self.values) if g is None else g

    def zero_grad(self):
        if self.values.grad is not None:
            self.values.grad = torch.zeros_like(self.values)


def parameters_of(module: torch.nn.Module, prefix: str = "") -> list[Parameter]:
    return [Parameter(p, prefix + name) for name, p in module.named_parameters()]


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.zero_grad()


def backward(loss: torch.Tensor, retain: bool = False):
    """Accumulate d(loss)/d(parameter) into every reachable leaf."""
    if loss.numel() != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if loss.grad_fn is None and not loss.requires_grad:
        # nothing reachable: every parameter keeps a zero gradient
        return
    loss.backward(retain_graph=retain)


@dataclass
class AdamState:
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Parameter, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.99, eps: float = 1e-8) -> "AdamState":
        z = torch.zeros_like(param.values, requires_grad=False)
        return cls(z, z.clone(), 0, lr, beta1, beta2, eps)


def adam_step(param: Parameter, state: AdamState) -> bool:
    """Apply one bias-corrected Adam update in place.

    Returns False (and leaves value and state untouched) when the gradient
    holds a non-finite entry.
    """
    g = param.gradient.detach()
    if state.m.shape != param.values.shape:
        raise GradientError(f"Adam state shape {tuple(state.m.shape)} does not match {param.tag} {tuple(param.values.shape)}")
    if not torch.isfinite(g).all():
        log.warning("non-finite gradient in %s, update skipped", param.tag)
        return False
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m.mul_(b1).add_(g * (1 - b1))
    state.v.mul_(b2).add_(g * g * (1 - b2))
    m_hat = state.m / (1 - b1 ** state.t)
    v_hat = state.v / (1 - b2 ** state.t)
    with torch.no_grad():
        param.values.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps))
    return True


@dataclass
class Adam:
    """Adam over a list of parameter groups, each with its own learning rate."""

    params: list[Parameter]
    states: dict[str, AdamState] = field(default_factory=dict)

    def add(self, params: Sequence[Parameter], lr: float, beta1=0.9, beta2=0.99, eps=1e-8):
        for p in params:
            if p.tag in self.states:
                raise GradientError(f"parameter {p.tag} already owned by this optimizer")
            self.params.append(p)
            self.states[p.tag] = AdamState.for_param(p, lr, beta1, beta2, eps)

    def step(self) -> list[str]:
        skipped = []
        for p in self.params:
            if not adam_step(p, self.states[p.tag]):
                skipped.append(p.tag)
        return skipped

    def zero_grad(self):
        zero_grad(self.params)

    def scale_lr(self, factor: float, prefix: str = ""):
        for tag, st in self.states.items():
            if tag.startswith(prefix):
                st.lr *= factor

    def set_lr(self, lr: float, prefix: str):
        for tag, st in self.states.items():
            if tag.startswith(prefix):
                st.lr = lr

    def replace(self, tag: str, param: Parameter, remap: Callable[[torch.Tensor], torch.Tensor] | None = None):
        """Swap in a reshaped parameter (after upsampling).

        Without ``remap`` the moments restart; with it both moments are
        carried over through ``remap`` and the step count is kept.
        """
        old = self.states[tag]
        self.params = [param if p.tag == tag else p for p in self.params]
        st = AdamState.for_param(param, old.lr, old.beta1, old.beta2, old.eps)
        if remap is not None:
            st.m, st.v, st.t = remap(old.m).clone(), remap(old.v).clamp_min(0).clone(), old.t
            if st.m.shape != param.values.shape:
                raise GradientError(f"remapped state of {tag} has shape {tuple(st.m.shape)}")
        self.states[tag] = st


# ---------------------------------------------------------------------------
# finite-difference verification

@dataclass
class RegisteredOp:
    fn: Callable[..., torch.Tensor]
    sampler: Callable[[np.random.Generator], tuple[torch.Tensor, ...]]
    h: float = 1e-5


REGISTRY: dict[str, RegisteredOp] = {}


def register(name: str, sampler, h: float = 1e-5):
    """Decorator adding an op to :data:`REGISTRY` with a valid-input sampler."""

    def wrap(fn):
        REGISTRY[name] = RegisteredOp(fn, sampler, h)
        return fn

    return wrap


def _as_output(y) -> torch.Tensor:
    if isinstance(y, (tuple, list)):
        return torch.cat([t.reshape(-1) for t in y if isinstance(t, torch.Tensor) and t.is_floating_point()])
    return y.reshape(-1)


def check_gradients(op: str | Callable, sample_inputs: Sequence[torch.Tensor], h: float = 1e-5,
                    seed: int = 0) -> float:
    """Max relative error between analytic and central-difference derivatives.

    The output is contracted with a fixed random cotangent so that one
    backward pass yields the full gradient of a scalar; each input
    coordinate is then perturbed by +-h and the difference of the two
    outputs is contracted with the same cotangent. The error of a coordinate is
    ``|analytic - fd| / max(1, |fd|)``.
    """
    fn = REGISTRY[op].fn if isinstance(op, str) else op
    inputs = [x.detach().to(torch.float64).clone() for x in sample_inputs]
    diff_idx = [i for i, x in enumerate(inputs) if x.is_floating_point()]
    for i in diff_idx:
        inputs[i].requires_grad_(True)
    out = _as_output(fn(*inputs))
    gen = torch.Generator().manual_seed(seed)
    cot = torch.randn(out.shape, generator=gen, dtype=torch.float64)
    analytic = torch.autograd.grad((out * cot).sum(), [inputs[i] for i in diff_idx], allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for k, i in enumerate(diff_idx):
            x = inputs[i]
            ga = analytic[k]
            ga = torch.zeros_like(x) if ga is None else ga
            flat = x.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                xp = flat[j].item()
                fp = _as_output(fn(*inputs)).clone()
                flat[j] = orig - h
                xm = flat[j].item()
                fm = _as_output(fn(*inputs)).clone()
                flat[j] = orig
                # divide by the step actually taken, which is exactly representable
                fd = ((fp - fm) / (xp - xm) * cot).sum().item()
                if not math.isfinite(fd):
                    raise GradientError(f"non-differentiable sample: input {i} coordinate {j}")
                err = abs(ga.reshape(-1)[j].item() - fd) / max(1.0, abs(fd))
                worst = max(worst, err)
    return worst
