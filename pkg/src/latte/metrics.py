"""Detection metrics: accuracy and average precision.

Accuracy uses the strict rule: probability > 0.5 predicts the generated
class, so an exact 0.5 resolves to real. Average precision is the
step-interpolated precision-weighted sum over recall increments on the
ranked score list; ties are broken by a stable sort, i.e. by item order.
Both are invariant under strictly monotone score transforms (AP fully,
accuracy whenever the transform preserves the 0.5 partition).
"""

from __future__ import annotations

import numpy as np


def accuracy(labels, probabilities, threshold: float = 0.5) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probabilities, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("cannot score an empty prediction set")
    predictions = (probs > threshold).astype(np.int64)
    return float((predictions == labels).mean())


def average_precision(labels, scores) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.size == 0:
        raise ValueError("cannot score an empty prediction set")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision is undefined without positive items")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    tp = np.cumsum(ranked)
    precision = tp / np.arange(1, labels.size + 1)
    recall_increment = ranked / n_pos
    return float(np.sum(precision * recall_increment))
