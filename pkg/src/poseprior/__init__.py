"""Pose-trajectory anomaly detection with a motion prior and a divided spatial-temporal transformer."""

from .motion import MotionPrior, fit_prior, scale_factor
from .stt import STTConfig, count_attention_flops
from .trainer import TrainConfig, train
from .trajectory import PoseTrajectory, WindowSample, load_trajectories, sample_windows, write_trajectories

__version__ = "0.1.0"

__all__ = [
    "MotionPrior",
    "PoseTrajectory",
    "STTConfig",
    "TrainConfig",
    "WindowSample",
    "count_attention_flops",
    "fit_prior",
    "load_trajectories",
    "sample_windows",
    "scale_factor",
    "train",
    "write_trajectories",
]
