from .codec import LatentCodec
from .sampler import ddim_sample, ddim_step, ddim_timesteps
from .schedule import NoiseSchedule
from .unet import (
    AttentionBlock,
    ConditioningBundle,
    ControlResiduals,
    HookHandle,
    ModelConfig,
    ModelContext,
    ToyUNet,
    list_blocks,
    register_hook,
    sinusoidal_embedding,
    unet_forward,
)

__all__ = [
    "AttentionBlock",
    "ConditioningBundle",
    "ControlResiduals",
    "HookHandle",
    "LatentCodec",
    "ModelConfig",
    "ModelContext",
    "NoiseSchedule",
    "ToyUNet",
    "ddim_sample",
    "ddim_step",
    "ddim_timesteps",
    "list_blocks",
    "register_hook",
    "sinusoidal_embedding",
    "unet_forward",
]
