"""Training, persistence, ablations, latent export and the command-line entry point."""

from .config import ConfigError, TrainConfig, load_config
from .optim import Adam, AdamState, optimizer_step
from .checkpoint import (Checkpoint, CheckpointError, ChecksumError, VersionError,
                         load_checkpoint, save_checkpoint)
from .training import TrainingDivergedError, TrainResult, evaluate, policy_from_checkpoint, train
from .ablations import run_datasize_ablation, run_occlusion_ablation
from .latents import LatentExport, export_latents, pca_project

__all__ = [
    "Adam", "AdamState", "Checkpoint", "CheckpointError", "ChecksumError", "ConfigError",
    "LatentExport", "TrainConfig", "TrainResult", "TrainingDivergedError", "VersionError",
    "evaluate", "export_latents", "load_checkpoint", "load_config", "optimizer_step",
    "pca_project", "policy_from_checkpoint", "run_datasize_ablation", "run_occlusion_ablation",
    "save_checkpoint", "train",
]
