from degforge.diffusion.denoiser import Denoiser, DenoiserConfig
from degforge.diffusion.generator import (
    GenDeg,
    GenTrainConfig,
    GuidanceConfig,
    compute_ranges,
    guided_eps,
    sample,
    train_generator,
    training_loss,
)
from degforge.diffusion.schedule import NoiseSchedule, forward_noise, make_schedule, one_step_reverse

__all__ = [
    "Denoiser",
    "DenoiserConfig",
    "GenDeg",
    "GenTrainConfig",
    "GuidanceConfig",
    "NoiseSchedule",
    "compute_ranges",
    "forward_noise",
    "guided_eps",
    "make_schedule",
    "one_step_reverse",
    "sample",
    "train_generator",
    "training_loss",
]
