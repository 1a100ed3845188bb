import numpy as np
import pytest
import torch
from PIL import Image

from latte.data import (
    DataError,
    PerturbationSpec,
    apply_perturbation,
    gaussian_kernel1d,
    load_image,
    load_manifest,
    preprocess,
    resize_image,
    save_manifest,
    scan_dataset,
    synth_real_image,
    synth_toy_dataset,
)


def _write_png(path, value=128, size=8):
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.full((size, size, 3), value, dtype=np.uint8)
    Image.fromarray(arr).save(path)


# --- scanning ---------------------------------------------------------------


def test_scan_flat_counts_and_labels(tmp_path):
    for i in range(2):
        _write_png(tmp_path / "real" / f"r{i}.png")
    for i in range(3):
        _write_png(tmp_path / "fake" / f"f{i}.png")
    manifest = scan_dataset(tmp_path, "flat")
    assert len(manifest.records) == 5
    assert sum(r.label for r in manifest.records) == 3
    assert all(r.split == "test" for r in manifest.records)


def test_scan_genimage_layout(tmp_path):
    _write_png(tmp_path / "genA" / "train" / "ai" / "x.png")
    _write_png(tmp_path / "genA" / "val" / "nature" / "y.png")
    manifest = scan_dataset(tmp_path, "genimage")
    by_split = {r.split: r for r in manifest.records}
    assert by_split["train"].label == 1
    assert by_split["val"].label == 0
    assert all(r.source == "genA" for r in manifest.records)


def test_scan_empty_directory(tmp_path):
    with pytest.raises(DataError, match="class directories"):
        scan_dataset(tmp_path, "flat")
    (tmp_path / "real").mkdir()
    (tmp_path / "fake").mkdir()
    with pytest.raises(DataError, match="zero images"):
        scan_dataset(tmp_path, "flat")


def test_scan_missing_class(tmp_path):
    _write_png(tmp_path / "real" / "a.png")
    with pytest.raises(DataError, match="missing class"):
        scan_dataset(tmp_path, "flat")


def test_rescan_is_byte_identical(tmp_path):
    for i in range(2):
        _write_png(tmp_path / "real" / f"{i}.png")
        _write_png(tmp_path / "fake" / f"{i}.png")
    m1 = scan_dataset(tmp_path, "flat")
    save_manifest(m1, tmp_path / "m1.jsonl")
    m2 = scan_dataset(tmp_path, "flat")
    save_manifest(m2, tmp_path / "m2.jsonl")
    assert (tmp_path / "m1.jsonl").read_bytes() == (tmp_path / "m2.jsonl").read_bytes()
    loaded = load_manifest(tmp_path / "m1.jsonl")
    assert loaded.records == m1.records


# --- preprocessing ----------------------------------------------------------


def test_preprocess_identity_size():
    image = torch.rand(3, 16, 16)
    out = preprocess(image, (16, 16), mean=0.0, std=1.0)
    torch.testing.assert_close(out, image)


def test_preprocess_constant_image():
    image = torch.full((3, 8, 8), 0.25)
    out = preprocess(image, (4, 4), mean=0.0, std=1.0)
    torch.testing.assert_close(out, torch.full((3, 4, 4), 0.25))


def test_downsample_matches_hand_bilinear():
    # 4x4 -> 2x2 with align_corners=False samples exactly the 2x2 block means
    vals = torch.arange(16, dtype=torch.float32).reshape(1, 4, 4) / 15.0
    out = resize_image(vals, (2, 2))
    expected = torch.tensor(
        [[(0 + 1 + 4 + 5) / 4, (2 + 3 + 6 + 7) / 4],
         [(8 + 9 + 12 + 13) / 4, (10 + 11 + 14 + 15) / 4]]
    ) / 15.0
    torch.testing.assert_close(out[0], expected)


def test_normalization():
    image = torch.full((3, 4, 4), 0.75)
    out = preprocess(image, (4, 4), mean=0.5, std=0.5)
    torch.testing.assert_close(out, torch.full((3, 4, 4), 0.5))


def test_load_image_undecodable(tmp_path):
    bad = tmp_path / "corrupt.png"
    bad.write_text("this is not an image")
    with pytest.raises(DataError, match="decode"):
        load_image(bad)


# --- perturbations ----------------------------------------------------------


def test_blur_zero_sigma_identity():
    image = torch.rand(3, 16, 16)
    out = apply_perturbation(image, PerturbationSpec("blur", 0.0))
    assert torch.equal(out, image)


def test_crop_ratio_one_identity():
    image = torch.rand(3, 16, 16)
    out = apply_perturbation(image, PerturbationSpec("crop_resize", 1.0))
    assert torch.equal(out, image)


def test_blur_kernel_normalized():
    for sigma in (0.3, 1.0, 2.5):
        kernel = gaussian_kernel1d(sigma)
        assert kernel.sum().item() == pytest.approx(1.0, abs=1e-6)
        assert kernel.numel() == 2 * int(np.ceil(3 * sigma)) + 1


def test_blur_preserves_constants():
    image = torch.full((3, 12, 12), 0.6)
    out = apply_perturbation(image, PerturbationSpec("blur", 1.5))
    torch.testing.assert_close(out, image, atol=1e-6, rtol=0)


def test_noise_statistics():
    image = torch.full((3, 32, 32), 0.5)
    spec = PerturbationSpec("noise", 0.1, seed=4)
    out = apply_perturbation(image, spec)
    assert not torch.equal(out, image)
    n = image.numel()
    assert abs(out.mean().item() - 0.5) < 3 * 0.1 / np.sqrt(n)
    # deterministic given the spec
    assert torch.equal(out, apply_perturbation(image, spec))


def test_jpeg_roundtrip_close_but_lossy():
    gen = torch.Generator().manual_seed(0)
    image = torch.rand(3, 32, 32, generator=gen)
    out = apply_perturbation(image, PerturbationSpec("jpeg", 90))
    assert out.shape == image.shape
    assert not torch.equal(out, image)
    assert (out - image).abs().mean().item() < 0.2
    assert torch.equal(out, apply_perturbation(image, PerturbationSpec("jpeg", 90)))


def test_crop_resize_changes_content():
    image = torch.zeros(3, 16, 16)
    image[:, :2, :] = 1.0  # bright band near the border disappears after cropping
    out = apply_perturbation(image, PerturbationSpec("crop_resize", 0.5))
    assert out.shape == image.shape
    assert out.max().item() < 0.5


@pytest.mark.parametrize(
    "kind,param",
    [("jpeg", 0), ("jpeg", 101), ("crop_resize", 0.0), ("crop_resize", 1.5),
     ("blur", -1.0), ("noise", -0.1), ("sharpen", 1.0)],
)
def test_perturbation_spec_validation(kind, param):
    with pytest.raises(ValueError):
        PerturbationSpec(kind, param)


def test_perturbation_spec_json_roundtrip():
    spec = PerturbationSpec("noise", 0.05, seed=9)
    assert PerturbationSpec.from_dict(spec.to_dict()) == spec


# --- synthetic toy data -----------------------------------------------------


def test_synth_real_image_deterministic():
    a = synth_real_image(np.random.default_rng(7), 32)
    b = synth_real_image(np.random.default_rng(7), 32)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (32, 32, 3)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_synth_dataset_balance_and_determinism(toy_backend, tmp_path):
    m1 = synth_toy_dataset(tmp_path / "a", 10, 32, seed=3, backend=toy_backend)
    counts = m1.counts()
    total_real = sum(c["real"] for c in counts.values())
    total_fake = sum(c["fake"] for c in counts.values())
    assert total_real == total_fake == 5

    m2 = synth_toy_dataset(tmp_path / "b", 10, 32, seed=3, backend=toy_backend)
    for r1, r2 in zip(m1.records, m2.records):
        assert (tmp_path / "a" / r1.path).read_bytes() == (tmp_path / "b" / r2.path).read_bytes()


def test_synth_dataset_rejects_odd_count(toy_backend, tmp_path):
    with pytest.raises(DataError, match="even"):
        synth_toy_dataset(tmp_path, 7, 32, seed=0, backend=toy_backend)


def test_synth_dataset_requires_backend(tmp_path):
    with pytest.raises(DataError, match="backend"):
        synth_toy_dataset(tmp_path, 4, 32, seed=0, backend=None)


def test_real_and_fake_statistics_differ(toy_backend, tmp_path):
    manifest = synth_toy_dataset(tmp_path, 200, 32, seed=13, backend=toy_backend)
    means = {0: [], 1: []}
    for record in manifest.records:
        image = load_image(manifest.resolve(record))
        means[record.label].append(image.std().item())
    m0, m1 = np.mean(means[0]), np.mean(means[1])
    v0, v1 = np.var(means[0], ddof=1), np.var(means[1], ddof=1)
    n0, n1 = len(means[0]), len(means[1])
    t_stat = abs(m0 - m1) / np.sqrt(v0 / n0 + v1 / n1)
    assert t_stat > 2.58  # two-sided p < 0.01 under the normal approximation
