"""Pluggable latent-space denoiser backend.

A backend owns image->latent encoding and noise prediction ``eps(z_t, t)``
over a fixed schedule. The trainable toy backend here is a desk-scale
stand-in for a large pretrained latent-diffusion checkpoint: a small
autoencoder (posterior mean only, so encoding is deterministic) plus a
conv denoiser trained with the standard noise-prediction objective.

External checkpoints are never bundled; adapters register a loader under
:func:`register_backend_loader` and must pass :func:`validate_backend`
before use.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from latte import io as latte_io
from latte.schedule import (
    NoiseSchedule,
    build_linear_schedule,
    forward_noise,
    schedule_from_dict,
    single_step_denoise,
)
from latte.seeding import stage_seed

log = logging.getLogger(__name__)


class DenoiserBackend:
    """Contract every backend (toy or adapter) must satisfy."""

    latent_shape: tuple[int, int, int]
    image_size: int
    schedule: NoiseSchedule

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """Deterministic image -> latent map ((3,S,S) or batched)."""
        raise NotImplementedError

    def predict_noise(self, z_t: torch.Tensor, t: int) -> torch.Tensor:
        """Noise estimate with the same shape as ``z_t``."""
        raise NotImplementedError

    def fingerprint(self) -> str:
        raise NotImplementedError


@dataclass(frozen=True)
class ToyBackendSpec:
    image_size: int = 32
    latent_channels: int = 4
    width: int = 32
    depth: int = 2
    ae_epochs: int = 6
    denoiser_epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 2e-3
    holdout_fraction: float = 0.1
    recon_threshold: float = 0.05
    patience: int = 4
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8 or self.image_size % 4 != 0:
            raise ValueError("image_size must be a multiple of 4 and at least 8")
        for name in ("latent_channels", "width", "depth", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.latent_channels, self.image_size // 4, self.image_size // 4)


class _Encoder(nn.Module):
    def __init__(self, width: int, latent_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(2 * width, latent_channels, 1),
        )

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, width: int, latent_channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * width, 1),
            nn.GELU(),
            nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1),
            nn.GELU(),
            nn.ConvTranspose2d(width, 3, 4, stride=2, padding=1),
            nn.Sigmoid(),
        )

    def forward(self, z):
        return self.net(z)


class _TimeEmbed(nn.Module):
    """Sinusoidal step embedding followed by a small MLP."""

    def __init__(self, dim: int, num_steps: int):
        super().__init__()
        self.num_steps = num_steps
        half = dim // 2
        freqs = torch.exp(torch.linspace(0.0, math.log(1000.0), half))
        self.register_buffer("freqs", freqs)
        self.proj = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        x = t.float()[:, None] / self.num_steps * self.freqs[None, :]
        emb = torch.cat([torch.sin(x), torch.cos(x)], dim=-1)
        return self.proj(emb)


class _Denoiser(nn.Module):
    def __init__(self, latent_channels: int, width: int, depth: int, num_steps: int):
        super().__init__()
        self.time = _TimeEmbed(width, num_steps)
        self.inp = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.blocks = nn.ModuleList(
            nn.Conv2d(width, width, 3, padding=1) for _ in range(depth)
        )
        self.out = nn.Conv2d(width, latent_channels, 3, padding=1)

    def forward(self, z, t):
        emb = self.time(t)[:, :, None, None]
        h = torch.nn.functional.gelu(self.inp(z) + emb)
        for block in self.blocks:
            h = torch.nn.functional.gelu(block(h) + emb)
        return self.out(h)


class ToyDiffusionBackend(DenoiserBackend):
    """Self-trained latent diffusion stand-in; immutable after construction."""

    def __init__(self, spec: ToyBackendSpec, encoder, decoder, denoiser, latent_scale: float,
                 schedule: NoiseSchedule, summary: dict | None = None):
        self.spec = spec
        self.latent_shape = spec.latent_shape
        self.image_size = spec.image_size
        self.schedule = schedule
        self.latent_scale = float(latent_scale)
        self.summary = dict(summary or {})
        self._encoder = encoder.eval()
        self._decoder = decoder.eval()
        self._denoiser = denoiser.eval()
        for module in (self._encoder, self._decoder, self._denoiser):
            module.requires_grad_(False)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        single = image.dim() == 3
        x = image.unsqueeze(0) if single else image
        with torch.no_grad():
            z = self._encoder(x) / self.latent_scale
        return z.squeeze(0) if single else z

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        single = z.dim() == 3
        x = z.unsqueeze(0) if single else z
        with torch.no_grad():
            img = self._decoder(x * self.latent_scale).clamp(0.0, 1.0)
        return img.squeeze(0) if single else img

    def predict_noise(self, z_t: torch.Tensor, t: int) -> torch.Tensor:
        self.schedule.check_step(t)
        single = z_t.dim() == 3
        x = z_t.unsqueeze(0) if single else z_t
        steps = torch.full((x.shape[0],), int(t), dtype=torch.long)
        with torch.no_grad():
            eps = self._denoiser(x, steps)
        return eps.squeeze(0) if single else eps

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for prefix, module in (
            ("encoder", self._encoder),
            ("decoder", self._decoder),
            ("denoiser", self._denoiser),
        ):
            for name, tensor in module.state_dict().items():
                arrays[f"{prefix}.{name}"] = tensor.numpy()
        arrays["latent_scale"] = np.asarray([self.latent_scale], dtype=np.float64)
        return arrays

    def fingerprint(self) -> str:
        return latte_io.fingerprint_arrays(self.state_arrays(), asdict(self.spec))

    def save(self, path) -> None:
        manifest = {
            "kind": "toy",
            "spec": asdict(self.spec),
            "schedule": self.schedule.to_dict(),
            "summary": self.summary,
        }
        latte_io.save_tensors(path, self.state_arrays(), manifest)

    @staticmethod
    def load(path) -> "ToyDiffusionBackend":
        arrays, manifest = latte_io.load_tensors(path)
        spec = ToyBackendSpec(**manifest["spec"])
        encoder = _Encoder(spec.width, spec.latent_channels)
        decoder = _Decoder(spec.width, spec.latent_channels)
        denoiser = _Denoiser(spec.latent_channels, spec.width, spec.depth, spec.num_steps)
        for prefix, module in (("encoder", encoder), ("decoder", decoder), ("denoiser", denoiser)):
            state = {
                name[len(prefix) + 1 :]: torch.from_numpy(arr.copy())
                for name, arr in arrays.items()
                if name.startswith(prefix + ".")
            }
            module.load_state_dict(state)
        return ToyDiffusionBackend(
            spec,
            encoder,
            decoder,
            denoiser,
            float(arrays["latent_scale"][0]),
            schedule_from_dict(manifest["schedule"]),
            manifest.get("summary"),
        )


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield torch.from_numpy(order[start : start + batch_size].copy())


def train_toy_backend(spec: ToyBackendSpec, images: torch.Tensor) -> ToyDiffusionBackend:
    """Train autoencoder then denoiser on a stack of (M,3,S,S) images in [0,1].

    Deterministic given the spec seed. Non-convergence (no held-out
    improvement over the patience window, or reconstruction above the
    configured threshold) is logged and flagged in the returned summary,
    never silently ignored.
    """
    if images.numel() == 0:
        raise ValueError("training dataset is empty")
    if images.shape[-1] != spec.image_size or images.shape[-2] != spec.image_size:
        raise ValueError(
            f"images are {tuple(images.shape[-2:])}, spec wants {spec.image_size}"
        )

    torch.manual_seed(spec.seed)
    encoder = _Encoder(spec.width, spec.latent_channels)
    decoder = _Decoder(spec.width, spec.latent_channels)
    denoiser = _Denoiser(spec.latent_channels, spec.width, spec.depth, spec.num_steps)
    schedule = build_linear_schedule(spec.num_steps, spec.beta_start, spec.beta_end)
    summary: dict = {"ae_plateau_epoch": None, "denoiser_plateau_epoch": None}

    split_rng = np.random.default_rng(stage_seed(spec.seed, "backend-split"))
    order = split_rng.permutation(images.shape[0])
    n_hold = max(1, int(round(images.shape[0] * spec.holdout_fraction)))
    if images.shape[0] == 1:
        n_hold = 0
    hold_idx = torch.from_numpy(order[:n_hold].copy())
    train_idx = torch.from_numpy(order[n_hold:].copy())
    train_images = images[train_idx]
    hold_images = images[hold_idx] if n_hold else images

    # --- autoencoder phase -------------------------------------------------
    ae_params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.Adam(ae_params, lr=spec.learning_rate)
    rng = np.random.default_rng(stage_seed(spec.seed, "backend-ae"))
    best, since_best = float("inf"), 0
    for epoch in range(spec.ae_epochs):
        for idx in _epoch_batches(train_images.shape[0], spec.batch_size, rng):
            batch = train_images[idx]
            recon = decoder(encoder(batch))
            loss = torch.nn.functional.mse_loss(recon, batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            val = torch.nn.functional.mse_loss(decoder(encoder(hold_images)), hold_images).item()
        if val < best - 1e-9:
            best, since_best = val, 0
        else:
            since_best += 1
            if since_best >= spec.patience:
                log.warning("autoencoder loss stopped improving at epoch %d", epoch)
                summary["ae_plateau_epoch"] = epoch
                break
    summary["ae_holdout_mse"] = best if best != float("inf") else None
    summary["ae_below_threshold"] = bool(spec.ae_epochs == 0 or best <= spec.recon_threshold)
    if spec.ae_epochs > 0 and best > spec.recon_threshold:
        log.warning(
            "autoencoder holdout reconstruction %.5f above threshold %.5f",
            best,
            spec.recon_threshold,
        )

    # scale latents to roughly unit variance so the noise objective is balanced
    with torch.no_grad():
        raw = encoder(train_images if train_images.shape[0] else images)
        latent_scale = max(float(raw.std()), 1e-6)
        latents = raw / latent_scale
        hold_latents = encoder(hold_images) / latent_scale

    # --- denoiser phase ----------------------------------------------------
    opt = torch.optim.Adam(denoiser.parameters(), lr=spec.learning_rate)
    rng = np.random.default_rng(stage_seed(spec.seed, "backend-dn"))
    noise_gen = torch.Generator().manual_seed(stage_seed(spec.seed, "backend-dn-noise"))

    def _denoise_loss(z0: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        t = torch.randint(0, spec.num_steps, (z0.shape[0],), generator=noise_gen)
        eps = torch.randn(z0.shape, generator=noise_gen)
        ab = torch.from_numpy(schedule.alpha_bars[t.numpy()]).float()[:, None, None, None]
        z_t = ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps
        pred = denoiser(z_t, t)
        return torch.nn.functional.mse_loss(pred, eps), torch.nn.functional.mse_loss(
            torch.zeros_like(eps), eps
        )

    best, since_best = float("inf"), 0
    for epoch in range(spec.denoiser_epochs):
        for idx in _epoch_batches(latents.shape[0], spec.batch_size, rng):
            loss, _ = _denoise_loss(latents[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            val, zero = _denoise_loss(hold_latents)
        if val.item() < best - 1e-9:
            best, since_best = val.item(), 0
        else:
            since_best += 1
            if since_best >= spec.patience:
                log.warning("denoiser loss stopped improving at epoch %d", epoch)
                summary["denoiser_plateau_epoch"] = epoch
                break
    if spec.denoiser_epochs > 0:
        with torch.no_grad():
            val, zero = _denoise_loss(hold_latents)
        summary["denoiser_holdout_mse"] = val.item()
        summary["zero_predictor_mse"] = zero.item()
        summary["denoiser_beats_zero"] = bool(val.item() < zero.item())
        if val.item() >= zero.item():
            log.warning("denoiser no better than the zero predictor")

    return ToyDiffusionBackend(spec, encoder, decoder, denoiser, latent_scale, schedule, summary)


def sample_ladder(num_steps: int, steps: int) -> list[int]:
    """Descending timestep ladder with ``steps`` distinct rungs."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    values = np.linspace(num_steps - 1, 0, steps)
    ladder = list(dict.fromkeys(int(math.floor(v + 0.5)) for v in values))
    return ladder


def sample_toy_fakes(backend: ToyDiffusionBackend, count: int, steps: int, seed: int) -> torch.Tensor:
    """Generate ``count`` fake images by iterated single-step denoising.

    Walks a descending timestep ladder: at each rung the current latent is
    denoised in one step, rescaled to a clean-latent estimate, and re-noised
    to the next rung's level. Deterministic given the seed.
    """
    if count <= 0:
        raise ValueError(f"count must be positive, got {count}")
    ladder = sample_ladder(backend.schedule.num_steps, steps)
    gen = torch.Generator().manual_seed(int(seed) & ((1 << 63) - 1))
    shape = (count, *backend.latent_shape)
    z = torch.randn(shape, generator=gen)
    x0_hat = z
    for i, t in enumerate(ladder):
        eps_hat = backend.predict_noise(z, t)
        z_hat = single_step_denoise(z, t, eps_hat, backend.schedule)
        x0_hat = (z_hat / math.sqrt(backend.schedule.alpha_bar(t))).clamp(-3.0, 3.0)
        if i + 1 < len(ladder):
            eps_next = torch.randn(shape, generator=gen)
            z = forward_noise(x0_hat, ladder[i + 1], eps_next, backend.schedule)
    return backend.decode(x0_hat)


# ---------------------------------------------------------------------------
# Adapter discovery and the shared contract suite
# ---------------------------------------------------------------------------

_BACKEND_LOADERS: dict[str, object] = {}


def register_backend_loader(name: str, loader) -> None:
    """Register a loader callable ``loader(path) -> DenoiserBackend``."""
    _BACKEND_LOADERS[name] = loader


def load_backend(kind: str, checkpoint: str | None = None) -> DenoiserBackend:
    """Resolve ``backend.kind`` (``toy`` or ``external:<path>``) to a backend."""
    if kind == "toy":
        if not checkpoint:
            raise ValueError("toy backend needs a checkpoint path")
        backend = ToyDiffusionBackend.load(checkpoint)
    elif kind.startswith("external:"):
        path = kind.split(":", 1)[1]
        loader = _BACKEND_LOADERS.get("external")
        if loader is None:
            raise ValueError(
                "no external backend adapter registered; call "
                "register_backend_loader('external', loader) first"
            )
        backend = loader(path)
    else:
        raise ValueError(f"unknown backend kind {kind!r}")
    validate_backend(backend)
    return backend


def validate_backend(backend: DenoiserBackend, probe_seed: int = 0) -> None:
    """Shape/determinism suite every backend must pass before use."""
    gen = torch.Generator().manual_seed(probe_seed)
    image = torch.rand((3, backend.image_size, backend.image_size), generator=gen)
    z = backend.encode(image)
    if tuple(z.shape) != tuple(backend.latent_shape):
        raise ValueError(
            f"encode produced shape {tuple(z.shape)}, declared {backend.latent_shape}"
        )
    if not torch.equal(z, backend.encode(image)):
        raise ValueError("encode is not deterministic")
    for t in (0, backend.schedule.num_steps // 2, backend.schedule.num_steps - 1):
        eps = backend.predict_noise(z, t)
        if eps.shape != z.shape:
            raise ValueError(f"predict_noise changed shape at t={t}")
        if not torch.isfinite(eps).all():
            raise ValueError(f"predict_noise produced non-finite values at t={t}")
