"""Figure rendering for the report-producing commands.

Every report path writes its figures next to the delimited output files.
Uses the Agg backend; nothing here opens a window.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def render_heatmaps(heatmap, path: str | Path, title: str = "") -> None:
    """One panel per consecutive timestep interval, shared color scale."""
    maps = heatmap.maps
    k = maps.shape[0]
    fig, axes = plt.subplots(1, k, figsize=(2.4 * k, 2.8), squeeze=False)
    vmax = float(maps.max()) or 1.0
    for i in range(k):
        ax = axes[0, i]
        im = ax.imshow(maps[i], cmap="magma", vmin=0.0, vmax=vmax)
        t_from, t_to = heatmap.intervals[i]
        ax.set_title(f"{t_from} → {t_to}", fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes.ravel().tolist(), shrink=0.85)
    if title:
        fig.suptitle(f"{title} (n={heatmap.count})")
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)


def render_sweep(rows: list[dict], path: str | Path) -> None:
    """Accuracy vs strength, one subplot per perturbation kind."""
    kinds = sorted({r["kind"] for r in rows})
    fig, axes = plt.subplots(1, len(kinds), figsize=(3.2 * len(kinds), 3.0), squeeze=False)
    for i, kind in enumerate(kinds):
        ax = axes[0, i]
        pts = sorted(
            ((r["param"], r["accuracy"]) for r in rows if r["kind"] == kind),
            key=lambda p: p[0],
        )
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, marker="o")
        ax.set_title(kind)
        ax.set_xlabel("strength")
        ax.set_ylim(0.0, 1.05)
        if i == 0:
            ax.set_ylabel("accuracy")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_matrix(report, path: str | Path, metric: str = "accuracy") -> None:
    trains, tests = report.sources()
    grid = np.full((len(trains), len(tests)), np.nan)
    for i, tr in enumerate(trains):
        for j, te in enumerate(tests):
            cell = report.cell(tr, te)
            if cell is not None:
                grid[i, j] = cell[metric]
    fig, ax = plt.subplots(figsize=(1.2 * len(tests) + 2, 1.0 * len(trains) + 2))
    im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(tests)), tests, rotation=45, ha="right")
    ax.set_yticks(range(len(trains)), trains)
    ax.set_xlabel("test source")
    ax.set_ylabel("train source")
    for i in range(len(trains)):
        for j in range(len(tests)):
            if not np.isnan(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.2f}", ha="center", va="center",
                        color="white", fontsize=8)
    fig.colorbar(im, ax=ax, shrink=0.8, label=metric)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_history(history: list[dict], path: str | Path) -> None:
    if not history:
        return
    epochs = [h["epoch"] for h in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
    ax1.plot(epochs, [h["train_loss"] for h in history], marker="o")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("train loss")
    ax1.grid(alpha=0.3)
    ax2.plot(epochs, [h["val_accuracy"] for h in history], marker="o", label="accuracy")
    ax2.plot(epochs, [h["val_average_precision"] for h in history], marker="s",
             label="avg precision")
    ax2.set_xlabel("epoch")
    ax2.set_ylim(0.0, 1.05)
    ax2.legend()
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
