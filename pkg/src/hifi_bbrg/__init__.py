"""Deterministic image translation with high-fidelity Brownian bridges."""

from .bridge import ScheduleParams, bridge_target, forward_sample, noise_scale, simulate_sde_path
from .data import PairedDataset, SyntheticTaskSpec, generate_synthetic_pairs, load_paired_folder
from .nets import ModelBundle, ModelConfig, build_models
from .sampler import SampleRequest, sample_multi_step, sample_one_step
from .trainer import TrainConfig, Trainer, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "ModelBundle",
    "ModelConfig",
    "PairedDataset",
    "SampleRequest",
    "ScheduleParams",
    "SyntheticTaskSpec",
    "TrainConfig",
    "Trainer",
    "bridge_target",
    "build_models",
    "forward_sample",
    "generate_synthetic_pairs",
    "load_checkpoint",
    "load_paired_folder",
    "noise_scale",
    "sample_multi_step",
    "sample_one_step",
    "save_checkpoint",
    "simulate_sde_path",
]
