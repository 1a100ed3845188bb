import numpy as np
import pytest
import torch

from latte.analysis import export_embeddings
from latte.backbone import BackboneConfig
from latte.data import DatasetManifest, ManifestRecord, PerturbationSpec
from latte.fusion import AggregationConfig
from latte.model import DetectorConfig, TrajectoryDetector
from latte.pipeline import PreprocessSettings, build_bundle, record_seed, settings_for
from latte.refiner import RefinerConfig
from latte.trajectory import select_timesteps


@pytest.fixture
def settings():
    return PreprocessSettings(backbone_input=(32, 32), backbone_mean=0.5,
                              backbone_std=0.5, backend_size=32)


def test_bundle_shapes_and_determinism(toy_manifest, toy_backend, settings):
    plan = select_timesteps(3, 1000)
    b1 = build_bundle(toy_manifest, "val", toy_backend, plan, settings, seed=7)
    b2 = build_bundle(toy_manifest, "val", toy_backend, plan, settings, seed=7)
    assert b1.images.shape[1:] == (3, 32, 32)
    assert b1.trajectories.shape[1:] == (3, *toy_backend.latent_shape)
    assert torch.equal(b1.images, b2.images)
    assert torch.equal(b1.trajectories, b2.trajectories)
    assert b1.ids == b2.ids


def test_bundle_independent_of_worker_count(toy_manifest, toy_backend, settings):
    plan = select_timesteps(2, 1000)
    one = build_bundle(toy_manifest, "val", toy_backend, plan, settings, seed=3, workers=1)
    four = build_bundle(toy_manifest, "val", toy_backend, plan, settings, seed=3, workers=4)
    assert torch.equal(one.trajectories, four.trajectories)
    assert torch.equal(one.images, four.images)


def test_record_seed_depends_on_path_not_position(toy_manifest):
    records = toy_manifest.records
    assert record_seed(1, records[0]) != record_seed(1, records[1])
    clone = ManifestRecord(id="other-id", path=records[0].path, label=records[0].label,
                           source=records[0].source, split=records[0].split)
    assert record_seed(1, clone) == record_seed(1, records[0])


def test_empty_split_rejected(toy_manifest, toy_backend, settings):
    plan = select_timesteps(1, 1000)
    with pytest.raises(ValueError, match="empty"):
        build_bundle(toy_manifest, "nope", toy_backend, plan, settings, seed=0)


def test_perturbation_feeds_through(toy_manifest, toy_backend, settings):
    plan = select_timesteps(2, 1000)
    clean = build_bundle(toy_manifest, "val", toy_backend, plan, settings, seed=1)
    noisy = build_bundle(
        toy_manifest, "val", toy_backend, plan, settings, seed=1,
        perturbation=PerturbationSpec("noise", 0.1, seed=2),
    )
    assert not torch.equal(clean.images, noisy.images)
    assert not torch.equal(clean.trajectories, noisy.trajectories)
    identity = build_bundle(
        toy_manifest, "val", toy_backend, plan, settings, seed=1,
        perturbation=PerturbationSpec("blur", 0.0),
    )
    assert torch.equal(clean.images, identity.images)
    assert torch.equal(clean.trajectories, identity.trajectories)


def test_duplicate_image_exports_identical_embeddings(toy_manifest, toy_backend, settings, tmp_path):
    record = toy_manifest.for_split("test")[0]
    dup = DatasetManifest(
        root=toy_manifest.root,
        records=(
            record,
            ManifestRecord(id=record.id + "#dup", path=record.path, label=record.label,
                           source=record.source, split=record.split),
        ),
    )
    plan = select_timesteps(2, 1000)
    bundle = build_bundle(dup, "test", toy_backend, plan, settings, seed=5)

    torch.manual_seed(0)
    d = 16
    model = TrajectoryDetector(
        DetectorConfig(
            latent_shape=toy_backend.latent_shape,
            backbone=BackboneConfig(kind="toy", d=d, input_size=(32, 32), width=8),
            refiner=RefinerConfig(d=d, n=2, layers=1, heads=2),
            aggregation=AggregationConfig(d=d, n=2, heads=2),
        )
    )
    table = export_embeddings(model, bundle)
    assert len(table.ids) == 2 and table.ids[0] != table.ids[1]
    np.testing.assert_array_equal(table.embeddings[0], table.embeddings[1])
    assert table.embeddings.shape[1] == 2 * d


def test_settings_for_reads_backbone_metadata(toy_backend):
    from latte.backbone import ToyVisionBackbone

    backbone = ToyVisionBackbone(BackboneConfig(kind="toy", d=8, input_size=(32, 32), width=8))
    s = settings_for(backbone, toy_backend)
    assert s.backbone_input == (32, 32)
    assert s.backend_size == 32


# --- cross-source matrix over two distinct toy generators -----------------------


def _train_source(tmp_path, name, backend_seed):
    from latte.backend import ToyBackendSpec, train_toy_backend
    from latte.data import synth_toy_dataset
    from latte.pipeline import train_full
    from latte.traineval import TrainConfig
    from conftest import make_images

    backend = train_toy_backend(
        ToyBackendSpec(seed=backend_seed, ae_epochs=5, denoiser_epochs=5),
        make_images(300, seed=backend_seed),
    )
    manifest = synth_toy_dataset(tmp_path / name, 400, 32, seed=backend_seed,
                                 backend=backend, sample_steps=25)
    plan = select_timesteps(5, 1000)
    d = 48
    torch.manual_seed(backend_seed)
    model = TrajectoryDetector(
        DetectorConfig(
            latent_shape=backend.latent_shape,
            backbone=BackboneConfig(kind="toy", d=d, input_size=(32, 32), width=16),
            refiner=RefinerConfig(d=d, n=5, layers=1, heads=4),
            aggregation=AggregationConfig(d=d, n=5, heads=4),
        )
    )
    train_full(model, manifest, backend, plan,
               TrainConfig(max_epochs=6, patience=6, seed=backend_seed), seed=backend_seed)
    return (model, backend, plan), manifest


def test_two_toy_generators_matrix_directional(tmp_path):
    from latte.pipeline import matrix_from_sources

    detectors, manifests = {}, {}
    for name, seed in (("genA", 100), ("genB", 200)):
        detectors[name], manifests[name] = _train_source(tmp_path, name, seed)
    report = matrix_from_sources(detectors, manifests, seed=1)
    assert len(report.records) == 4
    assert report.diagonal_mean() >= report.off_diagonal_mean()


def test_matrix_from_sources_marks_gaps(toy_manifest, toy_backend):
    from latte.pipeline import matrix_from_sources

    d = 16
    torch.manual_seed(0)
    model = TrajectoryDetector(
        DetectorConfig(
            latent_shape=toy_backend.latent_shape,
            backbone=BackboneConfig(kind="toy", d=d, input_size=(32, 32), width=8),
            refiner=RefinerConfig(d=d, n=2, layers=1, heads=2),
            aggregation=AggregationConfig(d=d, n=2, heads=2),
        )
    )
    plan = select_timesteps(2, 1000)
    report = matrix_from_sources(
        {"a": (model, toy_backend, plan)},
        {"a": toy_manifest, "b": toy_manifest},
        seed=0,
    )
    assert {(r["train_source"], r["test_source"]) for r in report.records} == {("a", "a"), ("a", "b")}
    assert {(m["train_source"], m["test_source"]) for m in report.missing} == {("b", "a"), ("b", "b")}
