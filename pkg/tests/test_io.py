import numpy as np
import pytest

from latte.io import fingerprint_arrays, load_tensors, save_tensors


def test_roundtrip(tmp_path):
    arrays = {
        "weights": np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32),
        "steps": np.arange(5, dtype=np.int64),
        "scalar": np.asarray([2.5]),
    }
    manifest = {"kind": "test", "nested": {"a": 1}}
    path = tmp_path / "blob.bin"
    save_tensors(path, arrays, manifest)
    loaded, meta = load_tensors(path)
    assert meta == manifest
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].dtype == arrays[name].dtype
        np.testing.assert_array_equal(loaded[name], arrays[name])


def test_identical_content_identical_bytes(tmp_path):
    arrays = {"x": np.ones((2, 2), dtype=np.float64)}
    save_tensors(tmp_path / "a.bin", arrays, {"v": 1})
    save_tensors(tmp_path / "b.bin", arrays, {"v": 1})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a container")
    with pytest.raises(ValueError, match="magic"):
        load_tensors(path)


def test_fingerprint_sensitivity():
    a = {"x": np.zeros(3, dtype=np.float32)}
    b = {"x": np.zeros(3, dtype=np.float32)}
    assert fingerprint_arrays(a) == fingerprint_arrays(b)
    b["x"] = b["x"] + 1e-7
    assert fingerprint_arrays(a) != fingerprint_arrays(b)
    assert fingerprint_arrays(a, {"m": 1}) != fingerprint_arrays(a, {"m": 2})
