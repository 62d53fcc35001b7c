"""VM-decomposed voxel fields and the small network heads.

A field stores, per channel group, three plane factors and three line
factors. Mode ``m`` pairs the plane over axes ``MAT_MODE[m]`` with the line
along ``VEC_MODE[m]``; a channel's value at a point is the bilinear plane
sample times the linear line sample, which equals trilinear interpolation
of the dense outer-product tensor.

``resolution`` counts cells per axis; factor grids carry ``resolution + 1``
nodes spanning the bounding box, so doubling the resolution nests the old
nodes inside the new grid.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffcore import register

MAT_MODE = ((0, 1), (0, 2), (1, 2))
VEC_MODE = (2, 1, 0)


def positional_encode(x: torch.Tensor, n_freqs: int, passthrough: bool = False) -> torch.Tensor:
    """``[x?, sin(2^k pi x), cos(2^k pi x)]`` for k < n_freqs, per coordinate."""
    parts = [x] if passthrough else []
    if n_freqs > 0:
        freqs = (2.0 ** torch.arange(n_freqs, dtype=x.dtype, device=x.device)) * math.pi
        xf = (x[..., None] * freqs).flatten(-2)
        parts += [torch.sin(xf), torch.cos(xf)]
    if not parts:
        return x[..., :0]
    return torch.cat(parts, -1)


def encoded_dim(dim: int, n_freqs: int, passthrough: bool = False) -> int:
    return dim * (2 * n_freqs + int(passthrough))


class TensorField(nn.Module):
    """Density and appearance factor grids over an axis-aligned box.

    ``density_rank`` / ``app_rank`` components per mode; the raw feature of
    a group is the vector of the ``3 * rank`` plane-line products.
    """

    def __init__(self, resolution, density_rank: int = 4, app_rank: int = 12, app_dim: int = 27,
                 box_min=(-1.0, -1.0, -1.0), box_max=(1.0, 1.0, 1.0), init_scale: float = 0.1,
                 generator: torch.Generator | None = None, dtype=torch.float32):
        super().__init__()
        self.resolution = tuple(int(r) for r in (resolution if np.iterable(resolution) else (resolution,) * 3))
        self.density_rank = density_rank
        self.app_rank = app_rank
        self.register_buffer("box_min", torch.tensor(box_min, dtype=dtype))
        self.register_buffer("box_max", torch.tensor(box_max, dtype=dtype))
        self.density_plane, self.density_line = self._init_factors(density_rank, init_scale, generator, dtype)
        self.app_plane, self.app_line = self._init_factors(app_rank, init_scale, generator, dtype)
        self.basis = nn.Linear(3 * app_rank, app_dim, bias=False, dtype=dtype)
        with torch.no_grad():
            w = torch.randn(self.basis.weight.shape, generator=generator, dtype=dtype)
            self.basis.weight.copy_(w / math.sqrt(3 * app_rank))

    def _init_factors(self, rank, scale, generator, dtype):
        planes, lines = nn.ParameterList(), nn.ParameterList()
        n = [r + 1 for r in self.resolution]
        for (a, b), c in zip(MAT_MODE, VEC_MODE):
            planes.append(nn.Parameter(scale * torch.randn(1, rank, n[b], n[a], generator=generator, dtype=dtype)))
            lines.append(nn.Parameter(scale * torch.randn(1, rank, n[c], 1, generator=generator, dtype=dtype)))
        return planes, lines

    def normalize(self, xyz: torch.Tensor) -> torch.Tensor:
        return (xyz - self.box_min) / (self.box_max - self.box_min) * 2 - 1

    def inside(self, xyz: torch.Tensor) -> torch.Tensor:
        return ((xyz >= self.box_min) & (xyz <= self.box_max)).all(-1)

    def _products(self, planes, lines, u: torch.Tensor) -> torch.Tensor:
        # u: (P, 3) normalized to [-1, 1]; returns (P, 3 * rank)
        out = []
        for m, ((a, b), c) in enumerate(zip(MAT_MODE, VEC_MODE)):
            gp = u[:, [a, b]].view(1, -1, 1, 2)
            gl = torch.stack([torch.zeros_like(u[:, c]), u[:, c]], -1).view(1, -1, 1, 2)
            p = F.grid_sample(planes[m], gp, mode="bilinear", align_corners=True)[0, :, :, 0]
            l = F.grid_sample(lines[m], gl, mode="bilinear", align_corners=True)[0, :, :, 0]
            out.append((p * l).t())
        return torch.cat(out, -1)

    def sample(self, xyz: torch.Tensor):
        """Raw (density, appearance) products at ``xyz``; zero outside the box.

        Returns ``(density_feats, app_feats, inside)`` with shapes
        ``(..., 3*density_rank)``, ``(..., 3*app_rank)``, ``(...)``.
        """
        shape = xyz.shape[:-1]
        flat = xyz.reshape(-1, 3)
        inside = self.inside(flat)
        u = self.normalize(flat).clamp(-1, 1)
        dens = self._products(self.density_plane, self.density_line, u)
        app = self._products(self.app_plane, self.app_line, u)
        mask = inside[:, None].to(dens.dtype)
        return (dens * mask).reshape(*shape, -1), (app * mask).reshape(*shape, -1), inside.reshape(shape)

    def density_features(self, xyz: torch.Tensor):
        shape = xyz.shape[:-1]
        flat = xyz.reshape(-1, 3)
        inside = self.inside(flat)
        u = self.normalize(flat).clamp(-1, 1)
        dens = self._products(self.density_plane, self.density_line, u) * inside[:, None].to(flat.dtype)
        return dens.reshape(*shape, -1), inside.reshape(shape)

    def app_features(self, raw_app: torch.Tensor) -> torch.Tensor:
        return self.basis(raw_app)

    def dense(self, group: str = "density") -> torch.Tensor:
        """Dense (3*rank, Nx+1, Ny+1, Nz+1) tensor of per-channel outer products."""
        planes, lines = (self.density_plane, self.density_line) if group == "density" else (self.app_plane, self.app_line)
        out = []
        for m, ((a, b), c) in enumerate(zip(MAT_MODE, VEC_MODE)):
            P = planes[m][0]  # (R, n_b, n_a)
            L = lines[m][0, :, :, 0]  # (R, n_c)
            letters = {a: "a", b: "b", c: "c"}
            target = "r" + "".join(letters[i] for i in range(3))
            out.append(torch.einsum(f"rba,rc->{target}", P, L))
        return torch.cat(out, 0)

    def factor_count(self) -> int:
        return sum(p.numel() for name, p in self.named_parameters() if "plane" in name or "line" in name)

    @torch.no_grad()
    def upsample(self, new_resolution) -> "TensorField":
        """Resample every factor onto a finer grid, in place.

        Values at the old nodes are reproduced exactly when each new cell
        count is an integer multiple of the old one.
        """
        new = tuple(int(r) for r in (new_resolution if np.iterable(new_resolution) else (new_resolution,) * 3))
        if any(n < o for n, o in zip(new, self.resolution)):
            raise ValueError(f"cannot shrink field from {self.resolution} to {new}")
        n = [r + 1 for r in new]
        for planes, lines in ((self.density_plane, self.density_line), (self.app_plane, self.app_line)):
            for m, ((a, b), c) in enumerate(zip(MAT_MODE, VEC_MODE)):
                planes[m] = nn.Parameter(resample_grid(planes[m].data, (n[b], n[a])))
                lines[m] = nn.Parameter(resample_grid(lines[m].data, (n[c], 1)))
        self.resolution = new
        return self


def resample_grid(values: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Node-aligned bilinear resampling of a ``(1, C, H, W)`` factor to ``size`` nodes."""
    return F.interpolate(values, size=size, mode="bilinear", align_corners=True)


def static_density(features: torch.Tensor, shift: float = -10.0) -> torch.Tensor:
    """Head-free density: softplus of the summed density features."""
    return F.softplus(features.sum(-1) + shift)


def mlp(in_dim: int, width: int, depth: int, out_dim: int, dtype=torch.float32) -> nn.Sequential:
    layers: list[nn.Module] = []
    d = in_dim
    for _ in range(depth - 1):
        layers += [nn.Linear(d, width, dtype=dtype), nn.ReLU()]
        d = width
    layers.append(nn.Linear(d, out_dim, dtype=dtype))
    return nn.Sequential(*layers)


def _zero_last(net: nn.Sequential):
    with torch.no_grad():
        net[-1].weight.zero_()
        net[-1].bias.zero_()


class ColorHead(nn.Module):
    """Feature MLP whose final layer alone sees the encoded view direction."""

    def __init__(self, feat_dim: int, width: int = 64, depth: int = 3, pe_view: int = 2, dtype=torch.float32):
        super().__init__()
        self.pe_view = pe_view
        self.trunk = mlp(feat_dim, width, depth - 1, width, dtype) if depth > 1 else nn.Identity()
        trunk_out = width if depth > 1 else feat_dim
        self.view_dim = encoded_dim(3, pe_view, passthrough=True)
        self.out = nn.Linear(trunk_out + self.view_dim, 3, dtype=dtype)

    def forward(self, features: torch.Tensor, view_dir: torch.Tensor) -> torch.Tensor:
        h = self.trunk(features)
        if isinstance(self.trunk, nn.Sequential):
            h = F.relu(h)
        v = positional_encode(view_dir, self.pe_view, passthrough=True)
        return torch.sigmoid(self.out(torch.cat([h, v], -1)))


def _space_time_input(xyz: torch.Tensor, t: torch.Tensor, pe_xyz: int, pe_time: int) -> torch.Tensor:
    t = t.expand(xyz.shape[:-1]).unsqueeze(-1) if t.dim() < xyz.dim() else t
    return torch.cat([positional_encode(xyz, pe_xyz, True), positional_encode(t, pe_time, True)], -1)


class DeformationHead(nn.Module):
    """Sample-space point and time -> canonical point, bounded by ``max_offset``."""

    def __init__(self, width=128, depth=4, pe_xyz=5, pe_time=4, max_offset=0.5, dtype=torch.float32):
        super().__init__()
        self.pe_xyz, self.pe_time, self.max_offset = pe_xyz, pe_time, max_offset
        self.in_dim = encoded_dim(3, pe_xyz, True) + encoded_dim(1, pe_time, True)
        self.net = mlp(self.in_dim, width, depth, 3, dtype)
        _zero_last(self.net)

    def offset(self, xyz: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return self.max_offset * torch.tanh(self.net(_space_time_input(xyz, t, self.pe_xyz, self.pe_time)))

    def forward(self, xyz: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        return xyz + self.offset(xyz, t)


class TimeHeads(nn.Module):
    """Shallow time-conditioned heads on canonical features -> (c^d, sigma^d, m^d)."""

    def __init__(self, density_dim: int, app_dim: int, width=64, depth=2, pe_time=4,
                 density_shift=-10.0, dtype=torch.float32):
        super().__init__()
        self.pe_time, self.density_shift = pe_time, density_shift
        self.t_dim = encoded_dim(1, pe_time, True)
        self.density_net = mlp(density_dim + self.t_dim, width, depth, 2, dtype)
        self.color_net = mlp(app_dim + self.t_dim, width, depth, 3, dtype)
        with torch.no_grad():
            # start dynamic density empty and nonrigidity at 0.5
            self.density_net[-1].weight.mul_(0.1)
            self.density_net[-1].bias.zero_()

    def time_code(self, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        t = t.expand(like.shape[:-1]).unsqueeze(-1) if t.dim() < like.dim() else t
        return positional_encode(t, self.pe_time, True)

    def forward(self, density_feats: torch.Tensor, app_feats: torch.Tensor, t: torch.Tensor):
        tc = self.time_code(t, density_feats)
        raw = self.density_net(torch.cat([density_feats, tc], -1))
        sigma = F.softplus(raw[..., 0] + density_feats.sum(-1) + self.density_shift)
        m = torch.sigmoid(raw[..., 1])
        c = torch.sigmoid(self.color_net(torch.cat([app_feats, tc], -1)))
        return c, sigma, m


class SceneFlowHead(nn.Module):
    """(x, y, z, t) -> (forward, backward) 3D displacement; supervision only."""

    def __init__(self, width=128, depth=4, pe_xyz=5, pe_time=4, max_flow=1.0, dtype=torch.float32):
        super().__init__()
        self.pe_xyz, self.pe_time, self.max_flow = pe_xyz, pe_time, max_flow
        self.net = mlp(encoded_dim(3, pe_xyz, True) + encoded_dim(1, pe_time, True), width, depth, 6, dtype)
        _zero_last(self.net)

    def forward(self, xyz: torch.Tensor, t: torch.Tensor):
        out = self.max_flow * torch.tanh(self.net(_space_time_input(xyz, t, self.pe_xyz, self.pe_time)))
        return out[..., :3], out[..., 3:]


# ---------------------------------------------------------------------------
# registered ops for gradient checks

def _field_sampler(rng):
    gen = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
    field = TensorField(4, density_rank=2, app_rank=2, app_dim=3, generator=gen, dtype=torch.float64, init_scale=1.0)
    xyz = torch.tensor(rng.uniform(-0.95, 0.95, size=(3, 3)))
    # the field's factors are passed explicitly so they are checked too
    return (xyz, field.density_plane[0].detach(), field.density_line[0].detach(),
            field.density_plane[1].detach(), field.density_line[1].detach(),
            field.density_plane[2].detach(), field.density_line[2].detach())


@register("sample_features", _field_sampler)
def _sample_features(xyz, p0, l0, p1, l1, p2, l2):
    field = TensorField(4, density_rank=2, app_rank=1, app_dim=1, dtype=torch.float64)
    u = field.normalize(xyz)
    planes = [p0, p1, p2]
    lines = [l0, l1, l2]
    return field._products(planes, lines, u)


def _density_sampler(rng):
    return (torch.tensor(rng.normal(size=(5, 6)) * 3 + 1.5),)


register("static_density", _density_sampler)(static_density)


def _encode_sampler(rng):
    return (torch.tensor(rng.uniform(-1, 1, size=(4, 3))),)


@register("positional_encode", _encode_sampler)
def _encode(x):
    return positional_encode(x, 4, passthrough=True)


def _head_params(module: nn.Module, rng) -> None:
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.tensor(rng.normal(size=tuple(p.shape)) * 0.3))


def _color_sampler(rng):
    head = ColorHead(5, width=8, depth=3, pe_view=2, dtype=torch.float64)
    _head_params(head, rng)
    feats = torch.tensor(rng.normal(size=(4, 5)))
    d = rng.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return feats, torch.tensor(d), *[p.detach() for p in head.parameters()]


def _call_with(module_factory):
    def run(*args):
        module = module_factory()
        n_in = run.n_inputs
        inputs, params = args[:n_in], args[n_in:]
        names = [n for n, _ in module.named_parameters()]
        return torch.func.functional_call(module, dict(zip(names, params)), inputs)
    return run


_color_op = _call_with(lambda: ColorHead(5, width=8, depth=3, pe_view=2, dtype=torch.float64))
_color_op.n_inputs = 2
register("color_head", _color_sampler)(_color_op)


def _deform_sampler(rng):
    head = DeformationHead(width=8, depth=3, pe_xyz=2, pe_time=2, dtype=torch.float64)
    _head_params(head, rng)
    xyz = torch.tensor(rng.uniform(-1, 1, size=(3, 3)))
    t = torch.tensor(rng.uniform(0, 1, size=(3, 1)))
    return xyz, t, *[p.detach() for p in head.parameters()]


_deform_op = _call_with(lambda: DeformationHead(width=8, depth=3, pe_xyz=2, pe_time=2, dtype=torch.float64))
_deform_op.n_inputs = 2
register("deform", _deform_sampler)(_deform_op)


def _time_sampler(rng):
    head = TimeHeads(4, 3, width=8, depth=2, pe_time=2, density_shift=0.0, dtype=torch.float64)
    _head_params(head, rng)
    return (torch.tensor(rng.normal(size=(3, 4))), torch.tensor(rng.normal(size=(3, 3))),
            torch.tensor(rng.uniform(0, 1, size=(3, 1))), *[p.detach() for p in head.parameters()])


_time_op = _call_with(lambda: TimeHeads(4, 3, width=8, depth=2, pe_time=2, density_shift=0.0, dtype=torch.float64))
_time_op.n_inputs = 3
register("dynamic_heads", _time_sampler)(_time_op)


def _flow_sampler(rng):
    head = SceneFlowHead(width=8, depth=3, pe_xyz=2, pe_time=2, dtype=torch.float64)
    _head_params(head, rng)
    return (torch.tensor(rng.uniform(-1, 1, size=(3, 3))), torch.tensor(rng.uniform(0, 1, size=(3, 1))),
            *[p.detach() for p in head.parameters()])


_flow_op = _call_with(lambda: SceneFlowHead(width=8, depth=3, pe_xyz=2, pe_time=2, dtype=torch.float64))
_flow_op.n_inputs = 2
register("scene_flow", _flow_sampler)(_flow_op)
