"""Dataset ingestion, preprocessing and the robustness perturbations.

Pipeline order is fixed: decode -> perturb -> resize -> normalize. All
transforms are pure given their spec, and every manifest is ordered
lexicographically by path so rescans of an unchanged tree are byte-identical.
"""

from __future__ import annotations

import io as _io
import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from latte.seeding import stage_seed

log = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}

LABEL_REAL = 0
LABEL_FAKE = 1  # project-wide convention: 1 = generated

PERTURBATION_KINDS = ("jpeg", "crop_resize", "blur", "noise")


class DataError(Exception):
    """Dataset-level failure (missing classes, empty trees, bad records)."""


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    id: str
    path: str  # relative to the manifest root
    label: int
    source: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    records: tuple[ManifestRecord, ...]

    def for_split(self, split: str) -> tuple[ManifestRecord, ...]:
        return tuple(r for r in self.records if r.split == split)

    def resolve(self, record: ManifestRecord) -> Path:
        return Path(self.root) / record.path

    def counts(self) -> dict:
        out: dict[str, dict[str, int]] = {}
        for r in self.records:
            bucket = out.setdefault(r.split, {"real": 0, "fake": 0})
            bucket["fake" if r.label == LABEL_FAKE else "real"] += 1
        return out


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(asdict(r), sort_keys=True) for r in manifest.records]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    records = []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        raw = json.loads(line)
        records.append(ManifestRecord(**raw))
    return DatasetManifest(root=str(path.parent), records=tuple(records))


def _classify_dir(name: str) -> int | None:
    if name in ("nature", "real"):
        return LABEL_REAL
    if name in ("ai", "fake"):
        return LABEL_FAKE
    return None


def scan_dataset(root: str | Path, layout: str = "flat") -> DatasetManifest:
    """Scan a directory tree into a manifest.

    ``genimage`` layout expects ``<generator>/<split>/{ai,nature}/...`` with
    ``ai`` mapping to fake and ``nature`` to real; ``flat`` expects
    ``[split/]{real,fake}/...``. Files directly under a class directory with
    no split component land in split ``test``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a readable directory")
    if layout not in ("genimage", "flat"):
        raise DataError(f"unknown dataset layout {layout!r}")

    expected = ("ai", "nature") if layout == "genimage" else ("real", "fake")
    class_dirs = [d for d in root.rglob("*") if d.is_dir() and d.name in expected]

    records = []
    for file in sorted(root.rglob("*")):
        if not file.is_file() or file.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        rel = file.relative_to(root)
        parts = rel.parts[:-1]
        if not parts or parts[-1] not in expected:
            continue
        label = _classify_dir(parts[-1])
        split = "test"
        for part in parts[:-1]:
            if part in ("train", "val", "test"):
                split = part
        if layout == "genimage":
            source = parts[0] if len(parts) > 2 else root.name
        else:
            source = root.name
        rel_str = rel.as_posix()
        records.append(
            ManifestRecord(id=rel_str, path=rel_str, label=label, source=source, split=split)
        )

    if not records:
        if class_dirs:
            raise DataError(f"zero images found under {root}")
        raise DataError(
            f"no class directories for layout {layout!r} under {root} "
            f"(expected {expected[0]}/{expected[1]})"
        )
    labels = {r.label for r in records}
    if labels != {LABEL_REAL, LABEL_FAKE}:
        missing = "real" if LABEL_REAL not in labels else "fake"
        raise DataError(f"missing class directory for {missing!r} images under {root}")
    return DatasetManifest(root=str(root), records=tuple(records))


# ---------------------------------------------------------------------------
# Image loading / preprocessing
# ---------------------------------------------------------------------------


def load_image(path: str | Path) -> torch.Tensor:
    """Decode an image file to a float32 CHW tensor in [0, 1]."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except Exception as exc:  # undecodable file is a record-level error
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def resize_image(image: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a CHW tensor; identity when already at ``size``."""
    if image.shape[-2:] == tuple(size):
        return image
    return F.interpolate(
        image.unsqueeze(0), size=tuple(size), mode="bilinear", align_corners=False
    ).squeeze(0)


def preprocess(
    image: torch.Tensor,
    size: tuple[int, int] = (224, 224),
    mean: float = 0.5,
    std: float = 0.5,
) -> torch.Tensor:
    """Resize to the model input size, then apply channel normalization."""
    return (resize_image(image, size) - mean) / std


# ---------------------------------------------------------------------------
# Perturbations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PerturbationSpec:
    """One test-time corruption: kind plus a single strength parameter.

    jpeg: quality in [1, 100]; crop_resize: kept center ratio in (0, 1];
    blur: gaussian sigma >= 0; noise: pixel sigma >= 0 (seeded).
    """

    kind: str
    param: float
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.kind == "jpeg" and not (1 <= self.param <= 100):
            raise ValueError(f"jpeg quality must be in [1, 100], got {self.param}")
        if self.kind == "crop_resize" and not (0.0 < self.param <= 1.0):
            raise ValueError(f"crop ratio must be in (0, 1], got {self.param}")
        if self.kind in ("blur", "noise") and self.param < 0.0:
            raise ValueError(f"{self.kind} sigma must be >= 0, got {self.param}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "param": self.param, "seed": self.seed}

    @staticmethod
    def from_dict(raw: dict) -> "PerturbationSpec":
        return PerturbationSpec(str(raw["kind"]), float(raw["param"]), int(raw.get("seed", 0)))


def gaussian_kernel1d(sigma: float) -> torch.Tensor:
    """Normalized 1-D gaussian with radius ceil(3*sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    xs = torch.arange(-radius, radius + 1, dtype=torch.float32)
    kernel = torch.exp(-0.5 * (xs / sigma) ** 2)
    return kernel / kernel.sum()


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    arr = (image.clamp(0, 1) * 255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def apply_perturbation(image: torch.Tensor, spec: PerturbationSpec) -> torch.Tensor:
    """Apply one corruption to a [0, 1] CHW image; pure given the spec."""
    if spec.kind == "jpeg":
        # pinned baseline profile: fixed quality, 4:2:0 subsampling, no optimizer
        buf = _io.BytesIO()
        Image.fromarray(_to_uint8(image)).save(
            buf, format="JPEG", quality=int(spec.param), subsampling=2, optimize=False
        )
        buf.seek(0)
        arr = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float32) / 255.0
        return torch.from_numpy(arr).permute(2, 0, 1).contiguous()

    if spec.kind == "crop_resize":
        if spec.param == 1.0:
            return image.clone()
        _, h, w = image.shape
        ch = max(1, int(round(h * spec.param)))
        cw = max(1, int(round(w * spec.param)))
        top = (h - ch) // 2
        left = (w - cw) // 2
        crop = image[:, top : top + ch, left : left + cw]
        return F.interpolate(
            crop.unsqueeze(0), size=(h, w), mode="bilinear", align_corners=False
        ).squeeze(0)

    if spec.kind == "blur":
        if spec.param == 0.0:
            return image.clone()
        kernel = gaussian_kernel1d(spec.param)
        radius = (kernel.numel() - 1) // 2
        c = image.shape[0]
        x = image.unsqueeze(0)
        x = F.pad(x, (radius, radius, radius, radius), mode="reflect")
        kh = kernel.view(1, 1, 1, -1).expand(c, 1, 1, -1)
        kv = kernel.view(1, 1, -1, 1).expand(c, 1, -1, 1)
        x = F.conv2d(x, kh, groups=c)
        x = F.conv2d(x, kv, groups=c)
        return x.squeeze(0)

    if spec.kind == "noise":
        if spec.param == 0.0:
            return image.clone()
        gen = torch.Generator().manual_seed(spec.seed)
        noise = torch.randn(image.shape, generator=gen, dtype=image.dtype)
        return (image + spec.param * noise).clamp(0.0, 1.0)

    raise ValueError(f"unknown perturbation kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Procedural toy data
# ---------------------------------------------------------------------------


def synth_real_image(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    """One procedural 'real' image: geometric shapes on a textured background.

    Returns a float array (size, size, 3) in [0, 1]. Shapes are sharp-edged
    so the class is learnable yet the backgrounds keep it from being trivial.
    """
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")

    c0, c1 = rng.uniform(0.0, 1.0, size=(2, 3))
    angle = rng.uniform(0.0, 2.0 * np.pi)
    grad = (np.cos(angle) * xs + np.sin(angle) * ys + 1.0) / 2.0
    img = c0[None, None, :] + (c1 - c0)[None, None, :] * grad[..., None]

    fx, fy = rng.uniform(2.0, 9.0, size=2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    amp = rng.uniform(0.05, 0.2)
    img += amp * np.sin(2.0 * np.pi * (fx * xs + fy * ys) + phase)[..., None]
    img += rng.normal(0.0, 0.02, size=img.shape)

    for _ in range(int(rng.integers(1, 4))):
        color = rng.uniform(0.0, 1.0, size=3)
        kind = int(rng.integers(0, 3))
        cx, cy = rng.uniform(0.15, 0.85, size=2)
        if kind == 0:  # circle
            r = rng.uniform(0.08, 0.3)
            mask = (xs - cx) ** 2 + (ys - cy) ** 2 <= r**2
        elif kind == 1:  # axis-aligned rectangle
            hw, hh = rng.uniform(0.08, 0.3, size=2)
            mask = (np.abs(xs - cx) <= hw) & (np.abs(ys - cy) <= hh)
        else:  # triangle via three half-plane tests
            pts = np.stack([rng.uniform(0.1, 0.9, size=2) for _ in range(3)])
            mask = np.ones_like(xs, dtype=bool)
            for i in range(3):
                ax, ay = pts[i]
                bx, by = pts[(i + 1) % 3]
                ox, oy = pts[(i + 2) % 3]
                side = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
                ref = (bx - ax) * (oy - ay) - (by - ay) * (ox - ax)
                mask &= side * ref >= 0
        img[mask] = 0.85 * color + 0.15 * img[mask]

    return np.clip(img, 0.0, 1.0)


def _save_png(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.clip(arr, 0, 1) * 255.0).round().astype(np.uint8)).save(path)


def _split_of(index: int, total: int, train_fraction: float, val_fraction: float) -> str:
    n_train = int(round(total * train_fraction))
    n_val = int(round(total * val_fraction))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def synth_toy_dataset(
    out_dir: str | Path,
    count: int,
    image_size: int,
    seed: int,
    backend=None,
    sample_steps: int = 30,
    train_fraction: float = 0.7,
    val_fraction: float = 0.15,
) -> DatasetManifest:
    """Write a balanced toy dataset (procedural reals, diffusion-sampled fakes).

    Images land under ``out_dir/<split>/{real,fake}/`` with a stratified,
    index-deterministic split assignment, plus ``manifest.jsonl`` at the root.
    """
    if count <= 0 or count % 2 != 0:
        raise DataError(f"count must be a positive even number, got {count}")
    if backend is None:
        raise DataError("a denoiser backend is required to synthesize fake images")

    from latte.backend import sample_toy_fakes  # local import to avoid a cycle

    out_dir = Path(out_dir)
    half = count // 2

    rng = np.random.default_rng(stage_seed(seed, "synth-real"))
    for i in range(half):
        split = _split_of(i, half, train_fraction, val_fraction)
        _save_png(synth_real_image(rng, image_size), out_dir / split / "real" / f"{i:05d}.png")

    fakes = sample_toy_fakes(backend, half, sample_steps, stage_seed(seed, "synth-fake"))
    for i in range(half):
        split = _split_of(i, half, train_fraction, val_fraction)
        arr = fakes[i].permute(1, 2, 0).numpy()
        _save_png(arr, out_dir / split / "fake" / f"{i:05d}.png")

    manifest = scan_dataset(out_dir, layout="flat")
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
