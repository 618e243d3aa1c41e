"""Latent-variable generative models learned with short-run Langevin inference."""

from .model import LinearGaussianDecoder, LinearGaussianSpec, LSTMDecoder, Model, ModelParams
from .sri import SriConfig, StepSizeGrid, optimize_step_size, short_run_infer, tilde_Q
from .training import TrainConfig, TrainState, train, train_step

__all__ = [
    "LinearGaussianDecoder",
    "LinearGaussianSpec",
    "LSTMDecoder",
    "Model",
    "ModelParams",
    "SriConfig",
    "StepSizeGrid",
    "optimize_step_size",
    "short_run_infer",
    "tilde_Q",
    "TrainConfig",
    "TrainState",
    "train",
    "train_step",
]
