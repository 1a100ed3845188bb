"""Trajectory diagnostics: spatial correction heatmaps and embedding export.

The heatmap for a consecutive timestep pair is the per-pixel L2 norm over
latent channels of the latent difference, averaged over samples (float64
accumulation, so sample order is immaterial). Heatmaps are computed on the
raw trajectory latents; pass refined token grids explicitly for the refined
variant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from latte import io as latte_io
from latte.trajectory import Trajectory


@dataclass
class CorrectionHeatmap:
    maps: np.ndarray  # (n-1, H, W), non-negative
    intervals: list[tuple[int, int]]  # (t_from, t_to) per map, noisier step first
    count: int

    def interval_means(self) -> np.ndarray:
        return self.maps.mean(axis=(1, 2))

    def save(self, path: str | Path) -> None:
        latte_io.save_tensors(
            path,
            {"maps": self.maps},
            {"intervals": [list(p) for p in self.intervals], "count": self.count},
        )

    @staticmethod
    def load(path: str | Path) -> "CorrectionHeatmap":
        arrays, meta = latte_io.load_tensors(path)
        return CorrectionHeatmap(
            arrays["maps"],
            [tuple(p) for p in meta["intervals"]],
            int(meta["count"]),
        )


def delta_heatmaps(trajectories: list[Trajectory]) -> CorrectionHeatmap:
    """Mean spatial correction magnitude per consecutive timestep pair."""
    if not trajectories:
        raise ValueError("need at least one trajectory")
    plan = trajectories[0].plan
    if plan.n < 2:
        raise ValueError("heatmaps need plans with at least two timesteps")
    for traj in trajectories:
        if traj.plan.steps != plan.steps:
            raise ValueError(
                f"mismatched plans: {traj.plan.steps} vs {plan.steps}"
            )
    shape = trajectories[0].latents.shape  # (n, C, H, W)
    acc = np.zeros((plan.n - 1, shape[2], shape[3]), dtype=np.float64)
    for traj in trajectories:
        lat = traj.latents.numpy().astype(np.float64)
        diff = lat[1:] - lat[:-1]
        acc += np.sqrt((diff**2).sum(axis=1))
    acc /= len(trajectories)
    intervals = [(plan.steps[k], plan.steps[k + 1]) for k in range(plan.n - 1)]
    return CorrectionHeatmap(acc, intervals, len(trajectories))


def interval_statistics(trajectories: list[Trajectory]) -> dict:
    """Per-interval mean change magnitude and its spread across intervals.

    A computed diagnostic (no thresholds): pacing of the denoising
    trajectory, useful for contrasting real against generated batches.
    """
    hm = delta_heatmaps(trajectories)
    means = hm.interval_means()
    return {
        "intervals": [list(p) for p in hm.intervals],
        "interval_means": [float(v) for v in means],
        "variance_across_intervals": float(np.var(means)),
        "count": hm.count,
    }


def refined_interval_magnitudes(model, bundle) -> dict:
    """Refined-token variant of the pacing diagnostic.

    Refined tokens are width-d vectors with no spatial layout, so instead of
    a heatmap this reports the mean L2 change between consecutive refined
    tokens per interval.
    """
    if len(bundle) == 0:
        raise ValueError("cannot analyse an empty split")
    if model.projector is None:
        raise ValueError("the model has no latent stream to refine")
    model.eval()
    all_diffs = []
    with torch.no_grad():
        for start in range(0, len(bundle), 64):
            idx = torch.arange(start, min(start + 64, len(bundle)))
            images, traj, _ = bundle.take(idx)
            tokens = model.projector(traj)
            if model.refiner is not None:
                patch, _ = model.backbone(images)
                tokens = model.refiner(tokens, patch)
            all_diffs.append((tokens[:, 1:] - tokens[:, :-1]).norm(dim=-1))
    diffs = torch.cat(all_diffs).double()
    means = diffs.mean(dim=0).numpy()
    return {
        "interval_means": [float(v) for v in means],
        "variance_across_intervals": float(np.var(means)),
        "count": int(diffs.shape[0]),
    }


# ---------------------------------------------------------------------------
# Embedding export
# ---------------------------------------------------------------------------


@dataclass
class EmbeddingTable:
    ids: list[str]
    labels: list[int]
    sources: list[str]
    embeddings: np.ndarray  # (M, width)

    def __post_init__(self):
        if len({len(self.ids), len(self.labels), len(self.sources), self.embeddings.shape[0]}) != 1:
            raise ValueError("embedding table columns disagree in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("image ids must be unique")

    def write_csv(self, path: str | Path) -> None:
        width = self.embeddings.shape[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "label", "source", *[f"e_{i}" for i in range(width)]])
            for i, image_id in enumerate(self.ids):
                writer.writerow(
                    [image_id, self.labels[i], self.sources[i],
                     *[repr(float(v)) for v in self.embeddings[i]]]
                )

    def save(self, path: str | Path) -> None:
        latte_io.save_tensors(
            path,
            {"embeddings": self.embeddings},
            {"ids": self.ids, "labels": self.labels, "sources": self.sources},
        )


def export_embeddings(model, bundle) -> EmbeddingTable:
    """Fused embedding per image (the classifier input), for external 2-D
    projection tools."""
    if len(bundle) == 0:
        raise ValueError("cannot export embeddings for an empty split")
    model.eval()
    chunks = []
    with torch.no_grad():
        for start in range(0, len(bundle), 64):
            idx = torch.arange(start, min(start + 64, len(bundle)))
            images, traj, _ = bundle.take(idx)
            chunks.append(model.embed(images, traj))
    emb = torch.cat(chunks).numpy().astype(np.float64)
    labels = [int(v) for v in bundle.labels.numpy()]
    return EmbeddingTable(list(bundle.ids), labels, list(bundle.sources), emb)
