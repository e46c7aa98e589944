"""Configuration, checkpoints, routing and the end-to-end jobs."""

from .checkpoint import Checkpoint, fingerprint, load_checkpoint, save_checkpoint
from .config import LARGE_PROFILE, SMALL_PROFILE, ModelProfile, RunConfig, config_from_dict, load_config, route_class
from .pipeline import evaluate_run, generate_all, generate_clips, run_pipeline, run_transfer_pipeline

__all__ = [
    "Checkpoint",
    "LARGE_PROFILE",
    "ModelProfile",
    "RunConfig",
    "SMALL_PROFILE",
    "config_from_dict",
    "evaluate_run",
    "fingerprint",
    "generate_all",
    "generate_clips",
    "load_checkpoint",
    "load_config",
    "route_class",
    "run_pipeline",
    "run_transfer_pipeline",
    "save_checkpoint",
]
