"""skipgs: view-adaptive backward-pass gating for Gaussian-splatting
training, embedded in a small differentiable CPU splatting trainer."""

__version__ = "0.1.0"

from .gating import (
    GateDecision,
    GatingConfig,
    GatingState,
    calibrate_rho_min,
    cumulative_ratio,
    deviation_score,
    skip_test,
    step,
    update_ema,
)
from .losses import LossConfig, combined_loss, l1_loss, psnr, ssim
from .renderer import (
    Camera,
    Gaussian3D,
    GradBuffer,
    RenderOutput,
    RenderSettings,
    SceneModel,
    composite_pixel,
    covariance_3d,
    effective_opacity,
    project,
    render,
    render_backward,
)
from .scene import SceneSpec, generate_scene, init_training_scene
from .trainer import TrainConfig, TrainReport, train

__all__ = [
    "GateDecision", "GatingConfig", "GatingState", "calibrate_rho_min",
    "cumulative_ratio", "deviation_score", "skip_test", "step", "update_ema",
    "LossConfig", "combined_loss", "l1_loss", "psnr", "ssim",
    "Camera", "Gaussian3D", "GradBuffer", "RenderOutput", "RenderSettings",
    "SceneModel", "composite_pixel", "covariance_3d", "effective_opacity",
    "project", "render", "render_backward",
    "SceneSpec", "generate_scene", "init_training_scene",
    "TrainConfig", "TrainReport", "train",
]
