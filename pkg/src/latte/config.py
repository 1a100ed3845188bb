"""Layered run configuration: dataclass defaults <- config file <- --set flags.

Every command resolves its full configuration up front and echoes it to the
output directory, so any run can be reproduced from the echoed file alone.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field, fields
from pathlib import Path

import yaml


class ConfigError(Exception):
    """Unresolvable configuration (unknown keys, bad values, missing files)."""


@dataclass
class BackendSection:
    kind: str = "toy"
    checkpoint: str = ""
    image_size: int = 32
    latent_channels: int = 4
    width: int = 32
    depth: int = 2
    ae_epochs: int = 6
    denoiser_epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 2e-3
    num_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2


@dataclass
class BackboneSection:
    kind: str = "toy"
    d: int = 512
    fine_tune: bool = True
    input_size: int = 224
    patch_size: int = 4
    width: int = 32
    checkpoint: str = ""


@dataclass
class TrajectorySection:
    n: int = 5
    steps: tuple = ()  # explicit override of the selected plan
    shared_eps: bool = False
    denoise_mode: str = "cumulative"


@dataclass
class RefinerSection:
    layers: int = 2
    heads: int = 8
    mode: str = "separate"
    scale: str = "per_head"
    ffn_mult: int = 4


@dataclass
class AggregateSection:
    mode: str = "average"
    cls_positional: bool = True
    cls_layers: int = 2


@dataclass
class ModelSection:
    use_visual: bool = True
    use_latent: bool = True
    use_refine: bool = True


@dataclass
class TrainSection:
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 4e-5
    max_epochs: int = 10
    patience: int = 3
    lr_floor: float = 0.0


@dataclass
class DataSection:
    root: str = ""
    layout: str = "flat"
    count: int = 2000
    image_size: int = 32
    sample_steps: int = 30
    train_fraction: float = 0.7
    val_fraction: float = 0.15
    max_failures: int = 0


@dataclass
class PerturbSection:
    jpeg: tuple = (95.0, 75.0, 50.0, 30.0)
    crop_resize: tuple = (1.0, 0.9, 0.8, 0.7)
    blur: tuple = (0.0, 0.5, 1.0, 2.0)
    noise: tuple = (0.0, 0.05, 0.1, 0.2)


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    workers: int = 1
    backend: BackendSection = field(default_factory=BackendSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    refiner: RefinerSection = field(default_factory=RefinerSection)
    aggregate: AggregateSection = field(default_factory=AggregateSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    perturb: PerturbSection = field(default_factory=PerturbSection)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {f.name for f in fields(RunConfig)} - {"seed", "out", "workers"}


def _coerce(value, target_type, key: str):
    if target_type is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: cannot interpret {value!r} as a boolean")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    if target_type is tuple:
        if isinstance(value, str):
            value = json.loads(value)
        return tuple(value)
    return str(value)


def _apply(config: RunConfig, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) == 1:
        if parts[0] not in ("seed", "out", "workers"):
            raise ConfigError(f"unknown top-level config key {key!r}")
        setattr(config, parts[0], _coerce(value, type(getattr(config, parts[0])), key))
        return
    if len(parts) != 2 or parts[0] not in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    section = getattr(config, parts[0])
    section_fields = {f.name: f for f in fields(section)}
    if parts[1] not in section_fields:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(section, parts[1])
    setattr(section, parts[1], _coerce(value, type(current), key))


def load_config(
    path: str | None = None,
    sets: tuple[str, ...] = (),
    seed: int | None = None,
    out: str | None = None,
    workers: int | None = None,
) -> RunConfig:
    config = RunConfig()
    if path:
        file = Path(path)
        if not file.is_file():
            raise ConfigError(f"config file {path} not found")
        raw = yaml.safe_load(file.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a key/value tree")
        for key, value in raw.items():
            if isinstance(value, dict):
                for sub, subval in value.items():
                    _apply(config, f"{key}.{sub}", subval)
            else:
                _apply(config, key, value)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        _apply(config, key.strip(), value.strip())
    if seed is not None:
        config.seed = int(seed)
    if out is not None:
        config.out = str(out)
    if workers is not None:
        config.workers = int(workers)
    return config


def echo_config(config: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.json"
    path.write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n")
    return path
