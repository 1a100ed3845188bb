"""End-to-end glue: manifests -> tensors -> trained detector -> metrics.

Per-item trajectory seeds derive from the record path (stage seed XOR
crc32(path)), so results are independent of manifest ordering and duplicate
listings of one image produce identical features.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import torch

from latte.backend import DenoiserBackend
from latte.data import (
    DatasetManifest,
    ManifestRecord,
    PerturbationSpec,
    apply_perturbation,
    load_image,
    preprocess,
    resize_image,
)
from latte.model import TrajectoryDetector
from latte.seeding import stage_seed
from latte.trajectory import TimestepPlan, extract_trajectory
from latte.traineval import ExampleBundle

log = logging.getLogger(__name__)


def record_seed(seed: int, record: ManifestRecord) -> int:
    return stage_seed(stage_seed(seed, "extract"), record.path)


@dataclass
class PreprocessSettings:
    backbone_input: tuple[int, int]
    backbone_mean: float
    backbone_std: float
    backend_size: int


def settings_for(backbone, backend: DenoiserBackend) -> PreprocessSettings:
    return PreprocessSettings(
        backbone_input=tuple(backbone.input_size),
        backbone_mean=backbone.mean,
        backbone_std=backbone.std,
        backend_size=backend.image_size,
    )


def load_record_image(
    manifest: DatasetManifest,
    record: ManifestRecord,
    perturbation: PerturbationSpec | None = None,
) -> torch.Tensor:
    """Decode and optionally perturb, before any resizing."""
    image = load_image(manifest.resolve(record))
    if perturbation is not None:
        image = apply_perturbation(image, perturbation)
    return image


def build_bundle(
    manifest: DatasetManifest,
    split: str,
    backend: DenoiserBackend,
    plan: TimestepPlan,
    settings: PreprocessSettings,
    seed: int,
    perturbation: PerturbationSpec | None = None,
    shared_eps: bool = False,
    mode: str = "cumulative",
    workers: int = 1,
    strict: bool = True,
) -> ExampleBundle:
    """Materialize one split: backbone inputs, trajectories, labels.

    Worker threads only parallelize decoding; every item's numbers are
    independent of the worker count.
    """
    records = manifest.for_split(split)
    if not records:
        raise ValueError(f"split {split!r} is empty in manifest under {manifest.root}")

    def _load(record: ManifestRecord):
        return load_record_image(manifest, record, perturbation)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            images = list(pool.map(_load, records))
    else:
        images = [_load(r) for r in records]

    vis, traj, labels, ids, sources = [], [], [], [], []
    for record, image in zip(records, images):
        backend_view = resize_image(image, (settings.backend_size, settings.backend_size))
        trajectory = extract_trajectory(
            backend_view, plan, backend, record_seed(seed, record),
            shared_eps=shared_eps, mode=mode,
        )
        vis.append(
            preprocess(image, settings.backbone_input, settings.backbone_mean, settings.backbone_std)
        )
        traj.append(trajectory.latents)
        labels.append(float(record.label))
        ids.append(record.id)
        sources.append(record.source)

    return ExampleBundle(
        images=torch.stack(vis),
        trajectories=torch.stack(traj),
        labels=torch.tensor(labels, dtype=torch.float32),
        ids=ids,
        sources=sources,
    )


def extract_to_store(
    manifest: DatasetManifest,
    split: str,
    backend: DenoiserBackend,
    plan: TimestepPlan,
    out_dir,
    seed: int,
    workers: int = 1,
) -> dict:
    """Persist trajectories for a split; skip-and-log per-item failures."""
    from latte.trajectory import save_trajectory

    records = manifest.for_split(split)
    fingerprint = backend.fingerprint()
    written, failures = 0, []

    def _one(record: ManifestRecord):
        image = load_record_image(manifest, record)
        view = resize_image(image, (backend.image_size, backend.image_size))
        return extract_trajectory(view, plan, backend, record_seed(seed, record))

    for record in records:
        try:
            trajectory = _one(record)
            save_trajectory(out_dir, record.id, trajectory, fingerprint)
            written += 1
        except Exception as exc:
            log.warning("extraction failed for %s: %s", record.id, exc)
            failures.append({"id": record.id, "error": str(exc)})
    return {"count": written, "failures": failures}


def train_full(
    model: TrajectoryDetector,
    manifest: DatasetManifest,
    backend: DenoiserBackend,
    plan: TimestepPlan,
    train_config,
    seed: int,
    shared_eps: bool = False,
    workers: int = 1,
):
    """Materialize train/val splits and run the training loop."""
    from latte.traineval import train_detector

    settings = settings_for(model.backbone, backend) if model.backbone is not None else None
    if settings is None:
        # latent-only variants still need image sizing for the backend path
        settings = PreprocessSettings((backend.image_size, backend.image_size), 0.5, 0.5,
                                      backend.image_size)
    train_bundle = build_bundle(manifest, "train", backend, plan, settings, seed,
                                shared_eps=shared_eps, workers=workers)
    val_bundle = build_bundle(manifest, "val", backend, plan, settings, seed,
                              shared_eps=shared_eps, workers=workers)
    result = train_detector(model, train_bundle, val_bundle, train_config)
    return result, train_bundle, val_bundle


def evaluate_full(
    model: TrajectoryDetector,
    manifest: DatasetManifest,
    backend: DenoiserBackend,
    plan: TimestepPlan,
    seed: int,
    split: str = "test",
    perturbation: PerturbationSpec | None = None,
    shared_eps: bool = False,
    workers: int = 1,
    return_scores: bool = False,
) -> dict:
    from latte.traineval import evaluate_detector

    settings = settings_for(model.backbone, backend) if model.backbone is not None else \
        PreprocessSettings((backend.image_size, backend.image_size), 0.5, 0.5, backend.image_size)
    bundle = build_bundle(manifest, split, backend, plan, settings, seed,
                          perturbation=perturbation, shared_eps=shared_eps, workers=workers)
    return evaluate_detector(model, bundle, return_scores=return_scores)


def matrix_from_sources(
    detectors: dict[str, tuple],
    manifests: dict[str, DatasetManifest],
    seed: int,
    split: str = "test",
    workers: int = 1,
):
    """Pairwise matrix over sources.

    ``detectors[source]`` is a ``(model, backend, plan)`` triple (plus an
    optional shared_eps flag); ``manifests[source]`` supplies the test data.
    Cells with missing detectors or manifests are recorded as gaps.
    """
    from latte.traineval import cross_matrix

    if len(detectors) < 1:
        raise ValueError("need at least one training source")

    def evaluate_cell(train_source: str, test_source: str) -> dict:
        if train_source not in detectors:
            raise KeyError(f"no checkpoint for source {train_source!r}")
        if test_source not in manifests:
            raise KeyError(f"no manifest for source {test_source!r}")
        entry = detectors[train_source]
        model, backend, plan = entry[:3]
        shared_eps = bool(entry[3]) if len(entry) > 3 else False
        return evaluate_full(model, manifests[test_source], backend, plan, seed,
                             split=split, shared_eps=shared_eps, workers=workers)

    sources = sorted(set(detectors) | set(manifests))
    return cross_matrix(evaluate_cell, sources, sources)
