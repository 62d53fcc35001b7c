"""Flat ``key = value`` configuration with a typed schema.

Every tunable of the system lives in :class:`TrainConfig`. Files are plain
text, one ``key = value`` per line, ``#`` starts a comment. Unknown keys and
values that fail to parse are collected and reported together.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    """Raised when a config file or override does not match the schema."""


@dataclass
class LossWeights:
    reproj_s: float = 0.02
    disp_s: float = 0.04
    monodepth_s: float = 0.04
    reproj_d: float = 0.02
    disp_d: float = 0.04
    monodepth_d: float = 0.04
    sf_reg: float = 0.1
    mask_d: float = 0.1
    distortion: float = 0.01
    anneal_horizon: int = 5000
    anneal_floor: float = 0.1

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not v >= 0 or v != v or v == float("inf"):
                raise ConfigError(f"loss weight {f.name} must be finite and >= 0, got {v}")


@dataclass
class TrainConfig:
    # run
    seed: int = 0
    threads: int = 1
    steps: int = 10000
    batch_size: int = 1024
    dtype: str = "float32"
    log_every: int = 1
    ckpt_every: int = 1000
    max_nan_retries: int = 3

    # ray space
    parameterization: str = "ndc"
    near: float = 1.0
    contraction_scale: float = 0.25
    ndc_xy_extent: float = 1.25  # field box half-width across the image plane in NDC
    n_samples: int = 128
    white_background: bool = False
    distance_scale: float = 25.0

    # camera
    init_focal: float = 0.0  # 0 -> max(W, H)
    optimize_poses: bool = True
    optimize_focal: bool = True
    use_gt_poses: bool = False
    use_gt_focal: bool = False
    pose_param: str = "relative"  # "relative" (chained from the middle frame) or "absolute"

    # fields
    static_res_init: int = 32
    static_res_final: int = 128
    dynamic_res_init: int = 32
    dynamic_res_final: int = 96
    upsample_steps: list[int] = field(default_factory=lambda: [2000, 3000, 4000, 5500, 7000])
    density_rank: int = 4
    app_rank: int = 12
    app_dim: int = 27
    density_shift: float = -10.0
    init_scale: float = 0.1

    # heads
    color_width: int = 64
    color_depth: int = 3
    time_width: int = 64
    time_depth: int = 2
    deform_width: int = 128
    deform_depth: int = 4
    flow_width: int = 128
    flow_depth: int = 4
    pe_xyz: int = 5
    pe_time: int = 4
    pe_view: int = 2
    deform_max: float = 0.5  # 0.25 of the [-1, 1] box extent
    flow_max: float = 1.0

    # optimizer
    lr_net: float = 1e-3
    lr_field: float = 2e-2
    lr_pose: float = 3e-4
    lr_focal: float = 0.0  # 0 -> lr_pose; follows the pose schedule
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    pose_lr_final_frac: float = 0.1
    pose_warmup_frac: float = 0.05  # linear pose-rate ramp while the fields form
    lr_final_frac: float = 0.1  # exponential decay target for field and head rates

    # schedule
    dynamic: bool = True
    static_warmup_frac: float = 0.1
    static_fraction: float = 0.5
    dynamic_fraction: float = 0.0  # minimum share of masked pixels per batch
    aux_fraction: float = 0.5

    # loss weights (mirrors LossWeights; anneal_horizon given as a fraction of steps)
    w_reproj_s: float = 0.02
    w_disp_s: float = 0.04
    w_monodepth_s: float = 0.04
    w_reproj_d: float = 0.02
    w_disp_d: float = 0.04
    w_monodepth_d: float = 0.04
    w_sf_reg: float = 0.1
    w_mask_d: float = 0.1
    w_distortion: float = 0.01
    anneal_frac: float = 0.5
    anneal_floor: float = 0.1

    # evaluation
    holdout_every: int = 0  # 0 -> train on every frame
    eval_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if self.parameterization not in ("ndc", "contraction"):
            problems.append(f"parameterization must be 'ndc' or 'contraction', got {self.parameterization!r}")
        if self.pose_param not in ("relative", "absolute"):
            problems.append(f"pose_param must be 'relative' or 'absolute', got {self.pose_param!r}")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype!r}")
        if any(b <= a for a, b in zip(self.upsample_steps, self.upsample_steps[1:])):
            problems.append(f"upsample_steps must be strictly increasing: {self.upsample_steps}")
        if self.static_res_final < self.static_res_init or self.dynamic_res_final < self.dynamic_res_init:
            problems.append("final resolutions must be >= initial resolutions")
        if self.n_samples < 2:
            problems.append("n_samples must be >= 2")
        if self.steps < 0 or self.batch_size < 1:
            problems.append("steps must be >= 0 and batch_size >= 1")
        if not 0.0 <= self.static_fraction <= 1.0:
            problems.append("static_fraction must lie in [0, 1]")
        if not 0.0 <= self.dynamic_fraction <= 1.0 - self.static_fraction:
            problems.append("dynamic_fraction must lie in [0, 1 - static_fraction]")
        if self.near <= 0:
            problems.append("near must be > 0")
        for f in dataclasses.fields(self):
            if f.name.startswith("w_") and not getattr(self, f.name) >= 0:
                problems.append(f"{f.name} must be >= 0")
        if problems:
            raise ConfigError("; ".join(problems))

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            reproj_s=self.w_reproj_s,
            disp_s=self.w_disp_s,
            monodepth_s=self.w_monodepth_s,
            reproj_d=self.w_reproj_d,
            disp_d=self.w_disp_d,
            monodepth_d=self.w_monodepth_d,
            sf_reg=self.w_sf_reg,
            mask_d=self.w_mask_d,
            distortion=self.w_distortion,
            anneal_horizon=max(1, int(round(self.anneal_frac * self.steps))),
            anneal_floor=self.anneal_floor,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **overrides) -> "TrainConfig":
        return dataclasses.replace(self, **overrides)


def _parse_value(raw: str, typ) -> Any:
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    if typ is str:
        return raw
    if typ == list[int]:
        raw = raw.strip("[]")
        return [int(x) for x in raw.replace(",", " ").split()] if raw.strip() else []
    raise TypeError(f"unsupported config type {typ}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return str(value)


def parse_overrides(pairs: dict[str, str], base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    hints = get_type_hints(TrainConfig)
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values = base.to_dict()
    problems = []
    for key, raw in pairs.items():
        if key not in known:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            values[key] = _parse_value(raw, hints[key])
        except (ValueError, TypeError) as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError("; ".join(problems))
    return TrainConfig(**values)


def loads(text: str, base: TrainConfig | None = None) -> TrainConfig:
    pairs = {}
    problems = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {lineno}: expected key = value")
            continue
        key, raw = line.split("=", 1)
        pairs[key.strip()] = raw
    if problems:
        raise ConfigError("; ".join(problems))
    return parse_overrides(pairs, base)


def load(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    return loads(Path(path).read_text(), base)


def dumps(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {_format_value(v)}\n" for k, v in cfg.to_dict().items())


def dump(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg))


# Full-scale voxel budgets: 640^3 (NDC) and 300^3 (contraction) finest voxels.
FULL_SCALE = {
    "ndc": dict(parameterization="ndc", static_res_final=640, dynamic_res_final=640),
    "contraction": dict(parameterization="contraction", static_res_final=300, dynamic_res_final=300),
}

PRESETS: dict[str, dict[str, Any]] = {
    "default": {},
    "full_ndc": FULL_SCALE["ndc"],
    "full_contraction": FULL_SCALE["contraction"],
    # static-only pose recovery on a synthetic orbit
    "desk_pose": dict(
        steps=2000,
        batch_size=512,
        n_samples=48,
        dynamic=False,
        ndc_xy_extent=1.5,
        static_res_init=16,
        static_res_final=128,
        upsample_steps=[400, 800, 1200],
        app_rank=8,
        app_dim=16,
        lr_pose=5e-4,
        lr_focal=1e-3,
        w_reproj_s=0.05,
        w_disp_s=0.1,
        w_monodepth_s=0.1,
        anneal_frac=1.0,
        ckpt_every=1000,
    ),
    # dynamic reconstruction with known poses
    "desk_dynamic": dict(
        steps=2000,
        batch_size=512,
        n_samples=48,
        use_gt_poses=True,
        use_gt_focal=True,
        optimize_poses=False,
        optimize_focal=False,
        static_res_init=16,
        static_res_final=64,
        dynamic_res_init=16,
        dynamic_res_final=64,
        upsample_steps=[500, 1000],
        app_rank=8,
        app_dim=16,
        deform_width=64,
        deform_depth=3,
        flow_width=64,
        flow_depth=3,
        holdout_every=4,
        dynamic_fraction=0.25,
        ckpt_every=1000,
    ),
    # seconds-scale run used by determinism and smoke tests
    "tiny": dict(
        steps=20,
        batch_size=64,
        n_samples=16,
        static_res_init=8,
        static_res_final=16,
        dynamic_res_init=8,
        dynamic_res_final=16,
        upsample_steps=[10],
        app_rank=4,
        app_dim=8,
        color_width=16,
        time_width=16,
        deform_width=16,
        deform_depth=2,
        flow_width=16,
        flow_depth=2,
        static_warmup_frac=0.25,
        ckpt_every=10,
    ),
}


def preset(name: str, **overrides) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **overrides})
