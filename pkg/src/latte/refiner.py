"""Latent-visual feature refinement.

Each trajectory latent is flattened, projected to the visual feature width,
and refined through a stack of transformer decoder layers whose cross
attention reads the patch tokens: per head, softmax(q k^T / scale) v with the
heads concatenated through an output projection, followed by a feed-forward
block; residual connections with pre-layer-norm around both sub-blocks.

``separate`` mode (default) gives every timestep its own parameter stack;
``joint`` routes all timestep tokens through one shared stack. There is no
attention among trajectory tokens here and no positional encoding on the
patch tokens, so the refinement is invariant to patch order.

The attention scale is ``sqrt(d/h)`` per head by default; ``scale="full"``
uses ``sqrt(d)`` (the single-head reading of the published form).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn


@dataclass(frozen=True)
class RefinerConfig:
    d: int
    n: int = 5
    layers: int = 2
    heads: int = 8
    mode: str = "separate"
    scale: str = "per_head"
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")
        if self.layers < 1 or self.n < 1:
            raise ValueError("layers and n must be >= 1")
        if self.mode not in ("separate", "joint"):
            raise ValueError(f"unknown refiner mode {self.mode!r}")
        if self.scale not in ("per_head", "full"):
            raise ValueError(f"unknown attention scale {self.scale!r}")


class LatentProjector(nn.Module):
    """Flatten a latent tensor and map it affinely to width d."""

    def __init__(self, latent_shape: tuple[int, int, int], d: int):
        super().__init__()
        self.latent_shape = tuple(latent_shape)
        flat = latent_shape[0] * latent_shape[1] * latent_shape[2]
        self.proj = nn.Linear(flat, d)

    def forward(self, latents: torch.Tensor) -> torch.Tensor:
        if tuple(latents.shape[-3:]) != self.latent_shape:
            raise ValueError(
                f"latent shape {tuple(latents.shape[-3:])} does not match "
                f"projector {self.latent_shape}"
            )
        return self.proj(latents.flatten(-3))


def project_latent(latent: torch.Tensor, projector: LatentProjector) -> torch.Tensor:
    """Single-latent convenience wrapper around :class:`LatentProjector`."""
    return projector(latent.unsqueeze(0)).squeeze(0)


class MultiHeadCrossAttention(nn.Module):
    def __init__(self, d: int, heads: int, scale: str = "per_head"):
        super().__init__()
        self.d = d
        self.heads = heads
        self.head_dim = d // heads
        self.scale = (d if scale == "full" else self.head_dim) ** 0.5
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)

    def forward(
        self, queries: torch.Tensor, memory: torch.Tensor, need_weights: bool = False
    ):
        # queries (B, M, d), memory (B, N, d)
        b, m, _ = queries.shape
        n = memory.shape[1]
        q = self.q_proj(queries).view(b, m, self.heads, self.head_dim).transpose(1, 2)
        k = self.k_proj(memory).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        v = self.v_proj(memory).view(b, n, self.heads, self.head_dim).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, m, self.d)
        out = self.out_proj(out)
        return (out, attn) if need_weights else (out, None)


class DecoderLayer(nn.Module):
    """Pre-norm cross-attention + feed-forward, residual around each."""

    def __init__(self, d: int, heads: int, scale: str, ffn_mult: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d)
        self.attn = MultiHeadCrossAttention(d, heads, scale)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d)
        )

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        attn_out, _ = self.attn(self.norm_attn(x), memory)
        x = x + attn_out
        return x + self.ffn(self.norm_ffn(x))


class DecoderStack(nn.Module):
    def __init__(self, config: RefinerConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            DecoderLayer(config.d, config.heads, config.scale, config.ffn_mult)
            for _ in range(config.layers)
        )

    def forward(self, x: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x, memory)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite refiner activations at layer {i}")
        return x


class TrajectoryRefiner(nn.Module):
    """Refine (B, n, d) trajectory tokens against (B, N, d) patch tokens."""

    def __init__(self, config: RefinerConfig):
        super().__init__()
        self.config = config
        count = config.n if config.mode == "separate" else 1
        self.stacks = nn.ModuleList(DecoderStack(config) for _ in range(count))

    def forward(self, tokens: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] != self.config.n:
            raise ValueError(
                f"trajectory length {tokens.shape[1]} does not match config n={self.config.n}"
            )
        if tokens.shape[-1] != self.config.d or memory.shape[-1] != self.config.d:
            raise ValueError("token/patch width does not match refiner width")
        if self.config.mode == "joint":
            return self.stacks[0](tokens, memory)
        refined = [
            self.stacks[i](tokens[:, i : i + 1, :], memory) for i in range(self.config.n)
        ]
        return torch.cat(refined, dim=1)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    block_errors: dict[str, float]
    passed: bool
    max_error: float
    failed_blocks: list[str]

    def __str__(self):
        status = "pass" if self.passed else "FAIL"
        worst = max(self.block_errors, key=self.block_errors.get) if self.block_errors else "-"
        lines = [f"gradient check {status}: max error {self.max_error:.3e} ({worst})"]
        for name in self.failed_blocks:
            lines.append(f"  exceeded on {name}: {self.block_errors[name]:.3e}")
        return "\n".join(lines)


def gradient_check(
    named_params: dict[str, torch.Tensor],
    loss_fn: Callable[[], torch.Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    analytic_grads: dict[str, torch.Tensor] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must recompute the scalar loss from the current parameter
    values. Analytic gradients default to autograd but can be supplied
    explicitly (for hand-derived gradients or fault injection). The error
    per block is ``|fd - analytic| / (|fd| + |analytic| + tiny)`` in the
    two-norm, so zero-gradient blocks compare cleanly.
    """
    if analytic_grads is None:
        loss = loss_fn()
        grads = torch.autograd.grad(loss, list(named_params.values()), allow_unused=True)
        analytic_grads = {
            name: (g if g is not None else torch.zeros_like(p))
            for (name, p), g in zip(named_params.items(), grads)
        }

    block_errors: dict[str, float] = {}
    with torch.no_grad():
        for name, param in named_params.items():
            fd = torch.zeros_like(param)
            flat = param.view(-1)
            fd_flat = fd.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                up = loss_fn().item()
                flat[j] = orig - step
                down = loss_fn().item()
                flat[j] = orig
                fd_flat[j] = (up - down) / (2.0 * step)
            an = analytic_grads[name]
            err = (fd - an).norm() / (fd.norm() + an.norm() + 1e-12)
            block_errors[name] = float(err)

    failed = sorted(name for name, err in block_errors.items() if err > tolerance)
    max_error = max(block_errors.values()) if block_errors else 0.0
    return GradCheckReport(tolerance, block_errors, not failed, max_error, failed)


def refiner_grad_check(
    config: RefinerConfig,
    tolerance: float = 1e-4,
    seed: int = 0,
    num_patches: int = 4,
    latent_shape: tuple[int, int, int] = (1, 2, 2),
    analytic_grads: dict[str, torch.Tensor] | None = None,
) -> GradCheckReport:
    """Numerically validate projector+refiner gradients on a tiny instance.

    Runs in float64; the loss is half the squared norm of the refined
    tokens, which exercises every parameter block.
    """
    if config.d > 16 or num_patches > 8 or config.layers > 2:
        raise ValueError("gradient check is meant for tiny configurations")
    torch.manual_seed(seed)
    projector = LatentProjector(latent_shape, config.d).double()
    refiner = TrajectoryRefiner(config).double()
    latents = torch.randn(1, config.n, *latent_shape, dtype=torch.float64)
    memory = torch.randn(1, num_patches, config.d, dtype=torch.float64)

    def loss_fn() -> torch.Tensor:
        tokens = projector(latents)
        refined = refiner(tokens, memory)
        return 0.5 * refined.square().sum()

    params = {
        **{f"projector.{k}": v for k, v in projector.named_parameters()},
        **{f"refiner.{k}": v for k, v in refiner.named_parameters()},
    }
    return gradient_check(params, loss_fn, tolerance, analytic_grads=analytic_grads)
