"""Toy structure-conditioned video diffusion: DDIM math, a content UNet with
structure and motion add-ons, stage-wise training, and inversion-based editing."""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .denoiser import ContentUNet, ModelBundle, ModelConfig, MotionModule, StructureAdapter, swap_content
from .diffusion import FINAL, NoiseSchedule, make_linear_schedule, make_timestep_plan
from .editing import MagicMixSpec, OutpaintSpec, SamplerConfig, invert_video, local_edit, magicmix, outpaint, sample_video, stylize
from .text import TextCondition

__all__ = [
    "FINAL",
    "ContentUNet",
    "MagicMixSpec",
    "ModelBundle",
    "ModelConfig",
    "MotionModule",
    "NoiseSchedule",
    "OutpaintSpec",
    "SamplerConfig",
    "StructureAdapter",
    "TextCondition",
    "invert_video",
    "load_checkpoint",
    "local_edit",
    "magicmix",
    "make_linear_schedule",
    "make_timestep_plan",
    "outpaint",
    "sample_video",
    "save_checkpoint",
    "stylize",
    "swap_content",
]
