"""Differentiable Gaussian splatting with an embedding-driven deformation field."""

from .camera import Camera, project_gaussian, project_point
from .deform import DeformField, apply_deltas, pos_encode
from .gaussians import GaussianSet, covariance_from_rotation_scale, eval_density, eval_sh_color
from .losses import LossWeights, knn_build, psnr, ssim_metric, total_loss
from .optim import AdamState, TrainConfig, model_size_report, train
from .rasterizer import rasterize_backward, rasterize_brute_force, rasterize_forward, render
from .scene_io import (
    Checkpoint,
    FrameDataset,
    SynthConfig,
    checkpoint_load,
    checkpoint_save,
    load_dataset,
    load_ply,
    save_ply,
    synth_scene_generate,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState", "Camera", "Checkpoint", "DeformField", "FrameDataset", "GaussianSet", "LossWeights",
    "SynthConfig", "TrainConfig", "apply_deltas", "checkpoint_load", "checkpoint_save",
    "covariance_from_rotation_scale", "eval_density", "eval_sh_color", "knn_build", "load_dataset",
    "load_ply", "model_size_report", "pos_encode", "project_gaussian", "project_point", "psnr",
    "rasterize_backward", "rasterize_brute_force", "rasterize_forward", "render", "save_ply",
    "ssim_metric", "synth_scene_generate", "total_loss", "train",
]
