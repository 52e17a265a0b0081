"""Unsupervised gaze correction and animation via dual eye-region in-painting."""

__version__ = "0.1.0"

from .config import TrainConfig, lr_schedule
from .data_pipeline import (Domain, ImageSample, MaskSpec, Rect, DatasetSplit,
                            apply_mask, collate, compute_eye_masks,
                            composite_back, extract_eye_composite,
                            generate_toy_dataset, hflip, load_dataset)
from .evaluation import (MetricReport, background_preservation,
                         identity_preservation, latent_stats, msssim,
                         perceptual_distance)
from .gam import (adv_loss_y, latent_recon_loss, recon_loss_synth,
                  recon_loss_y, train_step_gam)
from .gcm import (LossWeights, adv_loss_x, correct_gaze, correct_sample,
                  recon_loss_x, train_step_gcm)
from .inference import animate, default_sweep, emit_grid, interpolate_angle
from .networks import (ArchitectureConfig, NetworkBundle, build_bundle,
                       tiny_config)
from .pam import extract_content, mirror_loss, pretrain
from .training import run_training

__all__ = [
    "TrainConfig", "lr_schedule",
    "Domain", "ImageSample", "MaskSpec", "Rect", "DatasetSplit",
    "apply_mask", "collate", "compute_eye_masks", "composite_back",
    "extract_eye_composite", "generate_toy_dataset", "hflip", "load_dataset",
    "MetricReport", "background_preservation", "identity_preservation",
    "latent_stats", "msssim", "perceptual_distance",
    "adv_loss_y", "latent_recon_loss", "recon_loss_synth", "recon_loss_y",
    "train_step_gam",
    "LossWeights", "adv_loss_x", "correct_gaze", "correct_sample",
    "recon_loss_x", "train_step_gcm",
    "animate", "default_sweep", "emit_grid", "interpolate_angle",
    "ArchitectureConfig", "NetworkBundle", "build_bundle", "tiny_config",
    "extract_content", "mirror_loss", "pretrain",
    "run_training",
]
