"""Timestep selection and latent trajectory assembly.

For each selected timestep the clean latent is pushed forward to that noise
level in closed form and pulled back with a single denoising update, giving
the ordered sequence of approximate latents that the detector consumes.
Exactly one noise prediction per timestep; no reverse chain is ever run.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import torch

from latte import io as latte_io
from latte.backend import DenoiserBackend
from latte.schedule import forward_noise, single_step_denoise
from latte.seeding import item_seed

log = logging.getLogger(__name__)

# Canonical anchors as fractions of the schedule horizon. At the default
# 1000-step horizon these give the published five-step list [981, 741, 521,
# 261, 1] and the single middle step 521; the five-step list is anchored
# verbatim because its gaps are not exactly even.
_FIVE_STEP_FRACTIONS = (0.981, 0.741, 0.521, 0.261, 0.001)
_TOP_FRACTION = 0.981
_BOTTOM_FRACTION = 0.001
_MIDDLE_FRACTION = 0.521


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class TimestepPlan:
    """Strictly descending schedule indices, noisiest first."""

    steps: tuple[int, ...]

    def __post_init__(self):
        if len(self.steps) < 1:
            raise ValueError("a timestep plan needs at least one step")
        if any(self.steps[i] <= self.steps[i + 1] for i in range(len(self.steps) - 1)):
            raise ValueError(f"plan must be strictly descending, got {self.steps}")
        if self.steps[-1] < 0:
            raise ValueError("timesteps must be non-negative")

    @property
    def n(self) -> int:
        return len(self.steps)


def select_timesteps(n: int, horizon: int = 1000) -> TimestepPlan:
    """Evenly spread ``n`` timesteps over the horizon, endpoints included.

    ``n == 1`` returns the single middle step; ``n == 5`` the canonical
    anchored list. Interior steps round to the nearest integer with ties
    toward the larger timestep; collisions after rounding are an error.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if horizon < n:
        raise ValueError(f"horizon {horizon} too small for n={n}")
    if n == 1:
        steps = [_round_half_up(_MIDDLE_FRACTION * horizon)]
    elif n == 5:
        steps = [_round_half_up(f * horizon) for f in _FIVE_STEP_FRACTIONS]
    else:
        top = _round_half_up(_TOP_FRACTION * horizon)
        bottom = _round_half_up(_BOTTOM_FRACTION * horizon)
        steps = [
            _round_half_up(top + (bottom - top) * k / (n - 1)) for k in range(n)
        ]
    if any(s >= horizon for s in steps):
        raise ValueError(f"plan {steps} exceeds horizon {horizon}")
    if len(set(steps)) != len(steps):
        raise ValueError(f"n={n} exceeds the distinct representable steps in {horizon}")
    return TimestepPlan(tuple(steps))


@dataclass(frozen=True)
class Trajectory:
    """Stacked approximate latents (n, C, H, W) in plan order."""

    latents: torch.Tensor
    plan: TimestepPlan
    seed: int

    def __post_init__(self):
        if self.latents.shape[0] != self.plan.n:
            raise ValueError(
                f"{self.latents.shape[0]} latents for a plan of {self.plan.n} steps"
            )


def extract_trajectory(
    image: torch.Tensor,
    plan: TimestepPlan,
    backend: DenoiserBackend,
    seed: int,
    shared_eps: bool = False,
    mode: str = "cumulative",
) -> Trajectory:
    """Assemble the trajectory for one image; deterministic given the seed.

    ``shared_eps`` reuses a single noise draw across timesteps instead of the
    default fresh draw per step (study flag).
    """
    for t in plan.steps:
        backend.schedule.check_step(t)
    z0 = backend.encode(image)
    gen = torch.Generator().manual_seed(int(seed) & ((1 << 63) - 1))
    eps_shared = torch.randn(z0.shape, generator=gen, dtype=z0.dtype) if shared_eps else None

    latents = []
    for t in plan.steps:
        eps = eps_shared if shared_eps else torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
        z_t = forward_noise(z0, t, eps, backend.schedule)
        try:
            pred = backend.predict_noise(z_t, t)
        except Exception as exc:
            raise RuntimeError(f"noise prediction failed at timestep {t}") from exc
        z_hat = single_step_denoise(z_t, t, pred, backend.schedule, mode=mode)
        if not torch.isfinite(z_hat).all():
            raise ValueError(f"non-finite latent at timestep {t}; extraction aborted")
        latents.append(z_hat)
    return Trajectory(torch.stack(latents), plan, int(seed))


def batch_extract(
    images,
    plan: TimestepPlan,
    backend: DenoiserBackend,
    seed: int,
    strict: bool = False,
) -> list[Trajectory | None]:
    """Extract trajectories for a sequence of images.

    Element ``i`` equals ``extract_trajectory(images[i], ..., seed ^ i)``.
    Failures are logged and leave a ``None`` placeholder unless ``strict``.
    """
    out: list[Trajectory | None] = []
    for index, image in enumerate(images):
        try:
            out.append(extract_trajectory(image, plan, backend, item_seed(seed, index)))
        except Exception as exc:
            if strict:
                raise
            log.warning("trajectory extraction failed for item %d: %s", index, exc)
            out.append(None)
    return out


# ---------------------------------------------------------------------------
# Persistence: one tensor container per image plus a JSON sidecar
# ---------------------------------------------------------------------------


def save_trajectory(
    directory: str | Path,
    image_id: str,
    trajectory: Trajectory,
    backend_fingerprint: str,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = image_id.replace("/", "_")
    meta = {
        "image_id": image_id,
        "plan": list(trajectory.plan.steps),
        "seed": trajectory.seed,
        "backend_fingerprint": backend_fingerprint,
    }
    path = directory / f"{stem}.traj"
    latte_io.save_tensors(path, {"latents": trajectory.latents.numpy()}, meta)
    (directory / f"{stem}.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return path


def load_trajectory(path: str | Path) -> tuple[Trajectory, dict]:
    arrays, meta = latte_io.load_tensors(path)
    plan = TimestepPlan(tuple(int(t) for t in meta["plan"]))
    traj = Trajectory(torch.from_numpy(arrays["latents"].copy()), plan, int(meta["seed"]))
    return traj, meta
