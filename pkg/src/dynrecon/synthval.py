"""Synthetic ground truth, independent oracles and evaluation metrics in one namespace."""

from .metrics import (TrajectoryMetrics, align_trajectory, ate, psnr, rpe, ssim, trajectory_extent,
                      trajectory_metrics, umeyama)
from .synth import (PRESET_NAMES, Primitive, SceneSpec, Texture, Trajectory, generate, load_spec, oracle_composite,
                    oracle_render, preset)

__all__ = [
    "TrajectoryMetrics", "align_trajectory", "ate", "psnr", "rpe", "ssim", "trajectory_extent",
    "trajectory_metrics", "umeyama", "PRESET_NAMES", "Primitive", "SceneSpec", "Texture", "Trajectory",
    "generate", "load_spec", "oracle_composite", "oracle_render", "preset",
]
