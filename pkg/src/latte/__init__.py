"""Latent-trajectory-embedding detection of diffusion-generated images.

The toolkit extracts a trajectory of single-step-denoised latents from a
latent diffusion backend, refines each latent against visual patch features
with cross-attention, pools the refined sequence, fuses it with a global
image token and classifies real vs. generated. Everything is verifiable at
desk scale against a self-contained trainable toy backend.
"""

from latte.schedule import (
    NoiseSchedule,
    build_linear_schedule,
    forward_noise,
    single_step_denoise,
)
from latte.trajectory import TimestepPlan, Trajectory, extract_trajectory, select_timesteps

__all__ = [
    "NoiseSchedule",
    "build_linear_schedule",
    "forward_noise",
    "single_step_denoise",
    "TimestepPlan",
    "Trajectory",
    "extract_trajectory",
    "select_timesteps",
]

__version__ = "0.1.0"
