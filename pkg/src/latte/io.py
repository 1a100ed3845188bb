"""Binary tensor container with an embedded JSON manifest.

Used for every persisted artifact that carries tensors (backend and detector
checkpoints, trajectory files, heatmap grids). The format is a fixed magic,
a JSON header describing the arrays, then the raw array bytes. Unlike zip
based containers it embeds no timestamps, so identical contents produce
identical files -- a requirement for the bitwise reproducibility contract of
the CLI.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LTTC0001"


def save_tensors(path: str | Path, arrays: Mapping[str, np.ndarray], manifest: Mapping) -> None:
    """Write named arrays plus a JSON manifest to a single file."""
    path = Path(path)
    names = sorted(arrays)
    index = []
    offset = 0
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        index.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        )
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"arrays": index, "manifest": dict(manifest)}, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (arrays, manifest) written by :func:`save_tensors`."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a tensor container (bad magic)")
        header_len = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(header_len).decode())
        payload = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.copy()
    return arrays, header["manifest"]


def fingerprint_arrays(arrays: Mapping[str, np.ndarray], manifest: Mapping | None = None) -> str:
    """Short stable hash of array contents (and optionally a manifest)."""
    h = hashlib.blake2b(digest_size=8)
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(arr.dtype.str.encode())
        h.update(np.asarray(arr.shape, dtype=np.int64).tobytes())
        h.update(arr.tobytes())
    if manifest is not None:
        h.update(json.dumps(dict(manifest), sort_keys=True).encode())
    return h.hexdigest()
