"""Diffusion noise schedule and the two closed-form latent operators.

A schedule is the table of per-step noise variances ``betas`` with the
derived per-step signal retention ``alphas = 1 - betas`` and the cumulative
signal retention ``alpha_bars = cumprod(alphas)``. On top of it live the two
operators everything else builds on:

* :func:`forward_noise` jumps straight from a clean latent to its noisy
  version at step ``t``:  ``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``.
* :func:`single_step_denoise` applies one noise-prediction correction. The
  default ``cumulative`` mode subtracts ``sqrt(1 - abar_t) * eps_pred`` and
  therefore inverts :func:`forward_noise` exactly when the prediction equals
  the drawn noise; the ``literal`` mode subtracts ``sqrt(1 - alpha_t) *
  eps_pred`` (the per-step variant) and is kept for fidelity.

Both operators are pure and dtype-preserving; randomness stays with the
caller. Tables are float64 and marked read-only, so a schedule is safe to
share across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2

DENOISE_MODES = ("cumulative", "literal")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variance tables governing the diffusion chain."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float | None = None
    beta_end: float | None = None

    @property
    def num_steps(self) -> int:
        return int(self.betas.shape[0])

    def check_step(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps})")
        return t

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_step(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self.check_step(t)])

    def to_dict(self) -> dict:
        if self.beta_start is not None and self.beta_end is not None:
            return {
                "num_steps": self.num_steps,
                "beta_start": self.beta_start,
                "beta_end": self.beta_end,
            }
        return {"betas": self.betas.tolist()}


def schedule_from_betas(betas, beta_start: float | None = None, beta_end: float | None = None) -> NoiseSchedule:
    """Build a schedule from an explicit beta table, validating invariants."""
    betas = np.asarray(betas, dtype=np.float64).reshape(-1)
    if betas.size < 1:
        raise ValueError("schedule needs at least one step")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ValueError("betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alphas, alpha_bars, beta_start, beta_end)


def build_linear_schedule(
    num_steps: int = DEFAULT_NUM_STEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly interpolated beta table from ``beta_start`` to ``beta_end`` inclusive."""
    if num_steps < 1:
        raise ValueError(f"num_steps must be positive, got {num_steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    return schedule_from_betas(betas, float(beta_start), float(beta_end))


def schedule_from_dict(spec: dict) -> NoiseSchedule:
    """Inverse of :meth:`NoiseSchedule.to_dict`; accepts either JSON form."""
    if "betas" in spec:
        return schedule_from_betas(spec["betas"])
    return build_linear_schedule(
        int(spec["num_steps"]), float(spec["beta_start"]), float(spec["beta_end"])
    )


def _check_latents(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"latent shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def forward_noise(z0: torch.Tensor, t: int, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Noisy latent at step ``t`` in one closed form."""
    _check_latents(z0, eps)
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * z0 + math.sqrt(1.0 - abar) * eps


def single_step_denoise(
    z_t: torch.Tensor,
    t: int,
    eps_pred: torch.Tensor,
    schedule: NoiseSchedule,
    mode: str = "cumulative",
) -> torch.Tensor:
    """One noise-prediction correction of ``z_t``; see module docstring for modes."""
    _check_latents(z_t, eps_pred)
    if mode == "cumulative":
        coeff = math.sqrt(1.0 - schedule.alpha_bar(t))
    elif mode == "literal":
        coeff = math.sqrt(1.0 - schedule.alpha(t))
    else:
        raise ValueError(f"unknown denoise mode {mode!r}, expected one of {DENOISE_MODES}")
    return z_t - coeff * eps_pred
