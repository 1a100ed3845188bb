"""Seed derivation used across the pipeline.

Every stochastic stage derives its seed as ``global_seed XOR crc32(stage
tag)``, and per-item seeds as ``stage_seed XOR item_index``. This keeps
results independent of batching and scheduling order: item k always sees the
same stream no matter how the work is split.
"""

from __future__ import annotations

import zlib

_MASK = (1 << 63) - 1  # torch generators want a non-negative int64


def stage_seed(seed: int, tag: str) -> int:
    return (int(seed) ^ zlib.crc32(tag.encode("utf-8"))) & _MASK


def item_seed(seed: int, index: int) -> int:
    return (int(seed) ^ int(index)) & _MASK
