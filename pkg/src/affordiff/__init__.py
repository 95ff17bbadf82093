"""Diffusion-based waypoint prediction from images and language, trained on synthetic tasks."""

from .data import AffordanceSample, DatasetManifest, SyntheticTaskSpec, generate_synthetic, load_manifest, save_manifest
from .diffusion import NoiseSchedule, SamplerConfig, make_schedule, ode_sample, q_sample
from .evaluation import EvalReport, evaluate, evaluate_model, mae, predict
from .model import Denoiser, ModelConfig
from .training import TrainConfig, Trainer, finetune, load_model, pretrain

__version__ = "0.1.0"

__all__ = [
    "AffordanceSample", "DatasetManifest", "Denoiser", "EvalReport", "ModelConfig", "NoiseSchedule",
    "SamplerConfig", "SyntheticTaskSpec", "TrainConfig", "Trainer", "evaluate", "evaluate_model",
    "finetune", "generate_synthetic", "load_manifest", "load_model", "mae", "make_schedule",
    "ode_sample", "predict", "pretrain", "q_sample", "save_manifest",
]
