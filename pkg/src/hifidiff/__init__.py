"""Conditional diffusion for arbitrary-ratio reduction of inter-slice spacing."""

__version__ = "0.1.0"

from .data import Volume, downsample_volume, make_phantom_volume, normalize_volume, trilinear_interpolate
from .denoiser import DenoiserConfig, HiFiDiff
from .sampler import SamplerConfig, generate_inbetween_slice, super_resolve_volume
from .schedule import NoiseSchedule, make_linear_schedule
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train_loop

__all__ = [
    "DenoiserConfig",
    "HiFiDiff",
    "NoiseSchedule",
    "SamplerConfig",
    "TrainConfig",
    "Volume",
    "downsample_volume",
    "generate_inbetween_slice",
    "load_checkpoint",
    "make_linear_schedule",
    "make_phantom_volume",
    "normalize_volume",
    "save_checkpoint",
    "super_resolve_volume",
    "train_loop",
    "trilinear_interpolate",
]
