"""Vision backbone producing patch tokens and a global image token.

The toy backbone is a small convolutional trunk: patch tokens come from a
1x1 projection of the stride-4 feature grid, the global token from a linear
map of the mean-pooled trunk features (mirroring encoders without a class
token, where the global vector is pooled). Adapters for large pretrained
encoders register under :func:`register_backbone_builder` and must normalize
to the same (patch_tokens, global_token) pair at width ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn


@dataclass(frozen=True)
class BackboneConfig:
    kind: str = "toy"
    d: int = 512
    fine_tune: bool = True
    input_size: tuple[int, int] = (224, 224)
    patch_size: int = 4
    width: int = 32
    checkpoint: str = ""

    def __post_init__(self):
        if self.d <= 0:
            raise ValueError("feature width d must be positive")
        if min(self.input_size) <= 0:
            raise ValueError("input size must be positive")


@dataclass(frozen=True)
class VisualFeatures:
    """Patch token matrix (N, d) plus the global token (d,)."""

    patch_tokens: torch.Tensor
    global_token: torch.Tensor

    def __post_init__(self):
        if self.patch_tokens.shape[-1] != self.global_token.shape[-1]:
            raise ValueError("patch and global widths disagree")


class ToyVisionBackbone(nn.Module):
    """Conv trunk -> token grid; deterministic in eval mode (no dropout/BN)."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        if any(s % config.patch_size for s in config.input_size):
            raise ValueError("input size must be divisible by the patch size")
        if config.patch_size != 4:
            raise ValueError("toy trunk downsamples by 4; use patch_size=4")
        w = config.width
        self.config = config
        self.input_size = tuple(config.input_size)
        self.feature_dim = config.d
        self.mean = 0.5
        self.std = 0.5
        self.trunk = nn.Sequential(
            nn.Conv2d(3, w, 3, stride=2, padding=1),
            nn.GroupNorm(4, w),
            nn.GELU(),
            nn.Conv2d(w, 2 * w, 3, stride=2, padding=1),
            nn.GroupNorm(4, 2 * w),
            nn.GELU(),
        )
        self.patch_proj = nn.Conv2d(2 * w, config.d, 1)
        self.global_proj = nn.Linear(2 * w, config.d)

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if images.shape[-2:] != torch.Size(self.input_size):
            raise ValueError(
                f"expected input {self.input_size}, got {tuple(images.shape[-2:])}"
            )
        features = self.trunk(images)
        patches = self.patch_proj(features)
        b, d = patches.shape[0], patches.shape[1]
        patch_tokens = patches.reshape(b, d, -1).transpose(1, 2)  # (B, N, d)
        global_token = self.global_proj(features.mean(dim=(2, 3)))
        return patch_tokens, global_token


_BACKBONE_BUILDERS: dict[str, object] = {}


def register_backbone_builder(name: str, builder) -> None:
    """Register ``builder(config) -> nn.Module`` for ``kind == 'adapter:<name>'``."""
    _BACKBONE_BUILDERS[name] = builder


def build_backbone(config: BackboneConfig) -> nn.Module:
    if config.kind == "toy":
        return ToyVisionBackbone(config)
    if config.kind.startswith("adapter:"):
        name = config.kind.split(":", 1)[1]
        builder = _BACKBONE_BUILDERS.get(name)
        if builder is None:
            raise ValueError(
                f"no backbone adapter registered under {name!r}; "
                "call register_backbone_builder first"
            )
        return builder(config)
    raise ValueError(f"unknown backbone kind {config.kind!r}")


def encode_image(image: torch.Tensor, backbone: nn.Module) -> VisualFeatures:
    """Eval-mode features for a single preprocessed image."""
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        patch, global_token = backbone(image.unsqueeze(0))
    if was_training:
        backbone.train()
    return VisualFeatures(patch.squeeze(0), global_token.squeeze(0))


def set_trainable(backbone: nn.Module, fine_tune: bool) -> nn.Module:
    """Include or exclude backbone parameters from optimization."""
    for p in backbone.parameters():
        p.requires_grad_(fine_tune)
    return backbone
