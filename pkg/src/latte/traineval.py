"""Training loop, evaluation, and the cross-source evaluation matrix.

Training minimizes binary cross-entropy with a decoupled-weight-decay
adaptive optimizer and a cosine-annealed learning rate, keeping the best
validation-accuracy state and stopping early when validation stalls.
A NaN loss aborts with the last good state. Deterministic given the seed
(single process, seeded shuffling, no nondeterministic ops).
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from latte.metrics import accuracy, average_precision
from latte.seeding import stage_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 4e-5
    max_epochs: int = 10
    patience: int = 3
    lr_floor: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size must be >= 1 and max_epochs >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("hyperparameters must be non-negative")


@dataclass
class ExampleBundle:
    """Materialized tensors for one split."""

    images: torch.Tensor  # (M, 3, S, S), already normalized for the backbone
    trajectories: torch.Tensor | None  # (M, n, C, h, w)
    labels: torch.Tensor  # (M,) float 0/1
    ids: list[str] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    def take(self, idx: torch.Tensor) -> tuple:
        traj = self.trajectories[idx] if self.trajectories is not None else None
        return self.images[idx], traj, self.labels[idx]


def cosine_lr(epoch: int, max_epochs: int, lr: float, floor: float = 0.0) -> float:
    """Cosine annealing from ``lr`` at epoch 0 to ``floor`` at ``max_epochs``."""
    if max_epochs <= 0:
        return lr
    t = min(max(epoch, 0), max_epochs) / max_epochs
    return floor + 0.5 * (lr - floor) * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainResult:
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float
    diverged: bool
    first_batch_loss: float


def _forward_scores(model, bundle: ExampleBundle, batch_size: int = 64) -> np.ndarray:
    model.eval()
    scores = []
    with torch.no_grad():
        for start in range(0, len(bundle), batch_size):
            idx = torch.arange(start, min(start + batch_size, len(bundle)))
            images, traj, _ = bundle.take(idx)
            scores.append(torch.sigmoid(model(images, traj)))
    return torch.cat(scores).numpy().astype(np.float64)


def evaluate_detector(model, bundle: ExampleBundle, batch_size: int = 64,
                      return_scores: bool = False) -> dict:
    """Accuracy at the strict 0.5 threshold plus average precision."""
    if len(bundle) == 0:
        raise ValueError("cannot evaluate on an empty split")
    scores = _forward_scores(model, bundle, batch_size)
    labels = bundle.labels.numpy().astype(np.int64)
    out = {
        "accuracy": accuracy(labels, scores),
        "average_precision": average_precision(labels, scores),
        "count": int(labels.size),
    }
    if return_scores:
        out["scores"] = scores
    return out


def train_detector(model, train_bundle: ExampleBundle, val_bundle: ExampleBundle,
                   config: TrainConfig) -> TrainResult:
    labels = train_bundle.labels.numpy()
    if len(train_bundle) == 0 or len(val_bundle) == 0:
        raise ValueError("training and validation splits must be non-empty")
    if labels.min() == labels.max():
        raise ValueError("training split contains a single class; nothing to learn")

    params = model.trainable_parameters()
    optimizer = torch.optim.AdamW(
        params, lr=config.learning_rate, weight_decay=config.weight_decay
    )
    loss_fn = torch.nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(stage_seed(config.seed, "train-shuffle"))

    history: list[dict] = []
    best_state = copy.deepcopy(model.state_dict())
    best_epoch, best_acc = -1, -1.0
    first_batch_loss = math.nan
    diverged = False

    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config.max_epochs, config.learning_rate, config.lr_floor)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        order = rng.permutation(len(train_bundle))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = torch.from_numpy(order[start : start + config.batch_size].copy())
            images, traj, batch_labels = train_bundle.take(idx)
            logits = model(images, traj)
            loss = loss_fn(logits, batch_labels)
            if not torch.isfinite(loss):
                log.error("training diverged (non-finite loss) at epoch %d", epoch)
                diverged = True
                break
            if math.isnan(first_batch_loss):
                first_batch_loss = loss.item()
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        if diverged:
            break

        val = evaluate_detector(model, val_bundle)
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)) if epoch_losses else math.nan,
                "val_accuracy": val["accuracy"],
                "val_average_precision": val["average_precision"],
            }
        )
        if val["accuracy"] > best_acc:
            best_acc = val["accuracy"]
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
        elif epoch - best_epoch >= config.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    model.load_state_dict(best_state)
    model.eval()
    if best_epoch < 0 and config.max_epochs > 0 and not diverged:
        best_epoch = 0
    return TrainResult(history, best_epoch, best_acc, diverged, first_batch_loss)


# ---------------------------------------------------------------------------
# Cross-source evaluation matrix
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    """Metric records keyed by (train source, test source, perturbation)."""

    records: list[dict] = field(default_factory=list)
    missing: list[dict] = field(default_factory=list)

    def add(self, train_source: str, test_source: str, metrics: dict,
            perturbation: str = "none") -> None:
        for key in ("accuracy", "average_precision"):
            if not 0.0 <= metrics[key] <= 1.0:
                raise ValueError(f"{key} outside [0, 1]: {metrics[key]}")
        if metrics["count"] <= 0:
            raise ValueError("records need a positive item count")
        self.records.append(
            {
                "train_source": train_source,
                "test_source": test_source,
                "perturbation": perturbation,
                **{k: metrics[k] for k in ("accuracy", "average_precision", "count")},
            }
        )

    def sources(self) -> tuple[list[str], list[str]]:
        trains = sorted({r["train_source"] for r in self.records})
        tests = sorted({r["test_source"] for r in self.records})
        return trains, tests

    def cell(self, train_source: str, test_source: str) -> dict | None:
        for r in self.records:
            if r["train_source"] == train_source and r["test_source"] == test_source:
                return r
        return None

    def _values(self, diagonal: bool) -> list[float]:
        return [
            r["accuracy"]
            for r in self.records
            if (r["train_source"] == r["test_source"]) == diagonal
        ]

    def diagonal_mean(self) -> float | None:
        vals = self._values(diagonal=True)
        return float(np.mean(vals)) if vals else None

    def off_diagonal_mean(self) -> float | None:
        vals = self._values(diagonal=False)
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "records": self.records,
            "missing": self.missing,
            "diagonal_mean_accuracy": self.diagonal_mean(),
            "off_diagonal_mean_accuracy": self.off_diagonal_mean(),
        }

    def write_csv(self, path: str | Path, metric: str = "accuracy") -> None:
        """Matrix layout with row and column means; gaps stay empty."""
        trains, tests = self.sources()
        grid = {}
        for r in self.records:
            grid[(r["train_source"], r["test_source"])] = r[metric]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["train\\test", *tests, "row_mean"])
            col_values = {t: [] for t in tests}
            for tr in trains:
                row = []
                for te in tests:
                    val = grid.get((tr, te))
                    row.append("" if val is None else repr(val))
                    if val is not None:
                        col_values[te].append(val)
                present = [grid[(tr, te)] for te in tests if (tr, te) in grid]
                row_mean = repr(float(np.mean(present))) if present else ""
                writer.writerow([tr, *row, row_mean])
            col_means = [
                repr(float(np.mean(col_values[te]))) if col_values[te] else "" for te in tests
            ]
            writer.writerow(["col_mean", *col_means, ""])


def cross_matrix(evaluate_cell, sources_train: list[str], sources_test: list[str]) -> EvalReport:
    """Fill the pairwise matrix; ``evaluate_cell(train, test)`` returns
    metrics or raises, in which case the gap is recorded and the matrix
    continues."""
    if len(set(sources_train)) < 1:
        raise ValueError("need at least one training source")
    report = EvalReport()
    for tr in sources_train:
        for te in sources_test:
            try:
                report.add(tr, te, evaluate_cell(tr, te))
            except Exception as exc:
                log.warning("matrix cell (%s, %s) failed: %s", tr, te, exc)
                report.missing.append({"train_source": tr, "test_source": te, "error": str(exc)})
    return report


def write_history_csv(history: list[dict], path: str | Path) -> None:
    if not history:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        for row in history:
            writer.writerow(row)
