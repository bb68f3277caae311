"""Dynamic generator models learned by alternating back-propagation through time.

A video is produced by a latent state that evolves through a small neural
transition network driven by Gaussian innovations, and each state is decoded
into a frame.  Learning alternates Langevin sampling of the latents with
Adam steps on the network weights.
"""
from .diffcore import DimensionError, GraphStateError, SeededRng
from .inference import (
    InferenceError,
    LangevinConfig,
    PosteriorSample,
    langevin_run,
    langevin_step,
    latent_gradients,
    load_latents,
    log_joint,
    save_latents,
)
from .model import (
    CheckpointError,
    DynamicGenerator,
    LatentTrajectory,
    ModelConfig,
    desk_config,
    load_model,
    paper_config,
    rollout,
    save_model,
    synthesize,
)
from .trainer import (
    MetricsRow,
    TrainConfig,
    TrainState,
    adam_update,
    animate,
    interpolate_appearance,
    param_gradients,
    per_pixel_error,
    recover,
    reconstruct,
    train,
    write_metrics_csv,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "DimensionError",
    "DynamicGenerator",
    "GraphStateError",
    "InferenceError",
    "LangevinConfig",
    "LatentTrajectory",
    "MetricsRow",
    "ModelConfig",
    "PosteriorSample",
    "SeededRng",
    "TrainConfig",
    "TrainState",
    "adam_update",
    "animate",
    "desk_config",
    "interpolate_appearance",
    "langevin_run",
    "langevin_step",
    "latent_gradients",
    "load_latents",
    "load_model",
    "log_joint",
    "paper_config",
    "param_gradients",
    "per_pixel_error",
    "recover",
    "reconstruct",
    "rollout",
    "save_latents",
    "save_model",
    "synthesize",
    "train",
    "write_metrics_csv",
]
