"""Trajectory aggregation, fusion with the global token, and classification.

Aggregation modes:

* ``average``: elementwise mean of the refined tokens. The summands are
  sorted per coordinate before reduction so the result is bitwise identical
  under any token permutation.
* ``weighted``: a shared scalar gate per token, softmax-normalized; with
  zero gate parameters this degenerates to the plain average.
* ``cls``: a small self-attention encoder over a learned class token plus
  the trajectory tokens, optionally with learned positional embeddings
  (giving the aggregation access to timestep order); the output is the
  final class-token state.

Fusion concatenates the aggregate with the global image token into a width
2d embedding; the classifier is a single affine map to one logit with a
sigmoid on top. Label convention is fixed project-wide: 1 = generated.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from latte.refiner import MultiHeadCrossAttention


@dataclass(frozen=True)
class AggregationConfig:
    d: int
    mode: str = "average"
    n: int = 5
    cls_positional: bool = True  # only meaningful for mode="cls"
    cls_layers: int = 2
    heads: int = 8

    def __post_init__(self):
        if self.mode not in ("average", "weighted", "cls"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if self.mode == "cls" and self.d % self.heads != 0:
            raise ValueError("cls aggregation needs d divisible by heads")


class AverageAggregator(nn.Module):
    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] < 1:
            raise ValueError("cannot aggregate an empty token list")
        # sort per coordinate so summation order is canonical
        ordered, _ = torch.sort(tokens, dim=1)
        return ordered.sum(dim=1) / tokens.shape[1]


class WeightedAggregator(nn.Module):
    """Softmax over a shared scalar gate per token.

    A per-timestep gate (one weight vector per position) would be the other
    reading of a learned weighting; the shared gate is used throughout.
    """

    def __init__(self, d: int):
        super().__init__()
        self.gate = nn.Linear(d, 1)

    def forward(self, tokens: torch.Tensor, return_weights: bool = False):
        if tokens.shape[1] < 1:
            raise ValueError("cannot aggregate an empty token list")
        weights = torch.softmax(self.gate(tokens).squeeze(-1), dim=1)  # (B, n)
        out = (weights.unsqueeze(-1) * tokens).sum(dim=1)
        return (out, weights) if return_weights else out


class _SelfAttentionLayer(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.norm_attn = nn.LayerNorm(d)
        self.attn = MultiHeadCrossAttention(d, heads)
        self.norm_ffn = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d))

    def forward(self, x):
        normed = self.norm_attn(x)
        attn_out, _ = self.attn(normed, normed)
        x = x + attn_out
        return x + self.ffn(self.norm_ffn(x))


class ClsAggregator(nn.Module):
    def __init__(self, config: AggregationConfig):
        super().__init__()
        self.config = config
        self.cls_token = nn.Parameter(torch.randn(config.d) * 0.02)
        if config.cls_positional:
            self.positions = nn.Parameter(torch.randn(config.n, config.d) * 0.02)
        else:
            self.positions = None
        self.layers = nn.ModuleList(
            _SelfAttentionLayer(config.d, config.heads) for _ in range(config.cls_layers)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        if tokens.shape[1] < 1:
            raise ValueError("cannot aggregate an empty token list")
        if self.positions is not None:
            if tokens.shape[1] != self.config.n:
                raise ValueError(
                    f"positional table built for n={self.config.n}, got {tokens.shape[1]} tokens"
                )
            tokens = tokens + self.positions.unsqueeze(0)
        cls = self.cls_token.expand(tokens.shape[0], 1, -1)
        x = torch.cat([cls, tokens], dim=1)
        for layer in self.layers:
            x = layer(x)
        return x[:, 0, :]


def build_aggregator(config: AggregationConfig) -> nn.Module:
    if config.mode == "average":
        return AverageAggregator()
    if config.mode == "weighted":
        return WeightedAggregator(config.d)
    return ClsAggregator(config)


def fuse(aggregated: torch.Tensor, global_token: torch.Tensor) -> torch.Tensor:
    """Concatenate [aggregate || global token] into the fused embedding."""
    if aggregated.shape[-1] != global_token.shape[-1]:
        raise ValueError(
            f"width mismatch: aggregate {aggregated.shape[-1]} vs "
            f"global {global_token.shape[-1]}"
        )
    return torch.cat([aggregated, global_token], dim=-1)


class FusionClassifier(nn.Module):
    """Affine map to a single logit; probability of the generated class."""

    def __init__(self, in_features: int):
        super().__init__()
        self.linear = nn.Linear(in_features, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.linear.in_features:
            raise ValueError(
                f"embedding width {z.shape[-1]} does not match classifier "
                f"{self.linear.in_features}"
            )
        return self.linear(z).squeeze(-1)


def classify(z: torch.Tensor, classifier: FusionClassifier) -> torch.Tensor:
    return torch.sigmoid(classifier(z))
