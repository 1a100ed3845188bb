"""Full detector assembly and checkpointing.

Combines the vision backbone, latent projection, cross-attention refiner,
aggregation head and fusion classifier. Component switches allow the ablation
variants: visual-only, latent-only, visual+latent without refinement, and
the full model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import torch
from torch import nn

from latte import io as latte_io
from latte.backbone import BackboneConfig, build_backbone, set_trainable
from latte.fusion import AggregationConfig, FusionClassifier, build_aggregator, fuse
from latte.refiner import LatentProjector, RefinerConfig, TrajectoryRefiner

log = logging.getLogger(__name__)


class CheckpointError(Exception):
    """Checkpoint incompatible with the configured architecture."""


@dataclass(frozen=True)
class DetectorConfig:
    latent_shape: tuple[int, int, int]
    backbone: BackboneConfig
    refiner: RefinerConfig
    aggregation: AggregationConfig
    use_visual: bool = True
    use_latent: bool = True
    use_refine: bool = True

    def __post_init__(self):
        if not (self.use_visual or self.use_latent):
            raise ValueError("at least one of the visual/latent streams must be enabled")
        if self.use_refine and not (self.use_visual and self.use_latent):
            raise ValueError("refinement needs both the visual and latent streams")
        if self.use_latent and self.refiner.d != self.aggregation.d:
            raise ValueError("refiner and aggregation widths disagree")
        if self.backbone.d != self.refiner.d:
            raise ValueError("backbone and refiner widths disagree")

    @property
    def d(self) -> int:
        return self.backbone.d

    @property
    def fused_width(self) -> int:
        return self.d * (int(self.use_visual) + int(self.use_latent))

    def to_dict(self) -> dict:
        raw = asdict(self)
        raw["latent_shape"] = list(self.latent_shape)
        raw["backbone"]["input_size"] = list(self.backbone.input_size)
        return raw

    @staticmethod
    def from_dict(raw: dict) -> "DetectorConfig":
        return DetectorConfig(
            latent_shape=tuple(raw["latent_shape"]),
            backbone=BackboneConfig(
                **{**raw["backbone"], "input_size": tuple(raw["backbone"]["input_size"])}
            ),
            refiner=RefinerConfig(**raw["refiner"]),
            aggregation=AggregationConfig(**raw["aggregation"]),
            use_visual=raw["use_visual"],
            use_latent=raw["use_latent"],
            use_refine=raw["use_refine"],
        )


class TrajectoryDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        needs_backbone = config.use_visual or config.use_refine
        self.backbone = build_backbone(config.backbone) if needs_backbone else None
        if self.backbone is not None:
            set_trainable(self.backbone, config.backbone.fine_tune)
        if config.use_latent:
            self.projector = LatentProjector(config.latent_shape, config.d)
            self.refiner = TrajectoryRefiner(config.refiner) if config.use_refine else None
            self.aggregator = build_aggregator(config.aggregation)
        else:
            self.projector = None
            self.refiner = None
            self.aggregator = None
        self.classifier = FusionClassifier(config.fused_width)

    def embed(self, images: torch.Tensor, trajectories: torch.Tensor | None) -> torch.Tensor:
        """Fused embedding ahead of the classifier (width d or 2d)."""
        patch = global_token = None
        if self.backbone is not None:
            patch, global_token = self.backbone(images)
        parts = []
        if self.config.use_latent:
            if trajectories is None:
                raise ValueError("latent stream enabled but no trajectories given")
            tokens = self.projector(trajectories)  # (B, n, d)
            if self.refiner is not None:
                tokens = self.refiner(tokens, patch)
            parts.append(self.aggregator(tokens))
        if self.config.use_visual:
            parts.append(global_token)
        return fuse(parts[0], parts[1]) if len(parts) == 2 else parts[0]

    def forward(self, images: torch.Tensor, trajectories: torch.Tensor | None) -> torch.Tensor:
        return self.classifier(self.embed(images, trajectories))

    def predict_proba(self, images: torch.Tensor, trajectories: torch.Tensor | None) -> torch.Tensor:
        return torch.sigmoid(self.forward(images, trajectories))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


def save_checkpoint(path, model: TrajectoryDetector, extra: dict | None = None) -> None:
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    manifest = {"detector": model.config.to_dict(), "extra": dict(extra or {})}
    latte_io.save_tensors(path, arrays, manifest)


def load_checkpoint(path) -> tuple[TrajectoryDetector, dict]:
    arrays, manifest = latte_io.load_tensors(path)
    try:
        config = DetectorConfig.from_dict(manifest["detector"])
        model = TrajectoryDetector(config)
        state = {name: torch.from_numpy(arr.copy()) for name, arr in arrays.items()}
        model.load_state_dict(state, strict=True)
    except (KeyError, RuntimeError, TypeError, ValueError) as exc:
        raise CheckpointError(f"incompatible checkpoint {path}: {exc}") from exc
    model.eval()
    return model, manifest.get("extra", {})
