from .sampling import DdimSamplerConfig, SingularityError, ddim_sample, ddim_step, ddim_timesteps, predict_x0
from .schedule import NoiseSchedule, make_schedule, q_sample
from .training import (
    DiffusionTrainConfig,
    cosine_lr,
    ddpm_loss,
    generate_fakes,
    load_diffusion,
    save_diffusion,
    train_diffusion,
)
from .unet import UNet, UNetSpec, timestep_embedding, unet_forward

__all__ = [
    "DdimSamplerConfig", "DiffusionTrainConfig", "NoiseSchedule", "SingularityError", "UNet", "UNetSpec",
    "cosine_lr", "ddim_sample", "ddim_step", "ddim_timesteps", "ddpm_loss", "generate_fakes", "load_diffusion",
    "make_schedule", "predict_x0", "q_sample", "save_diffusion", "timestep_embedding", "train_diffusion",
    "unet_forward",
]
