"""Command-line interface.

Subcommands: synth, extract, train, eval, matrix, perturb-eval, heatmap,
embed. Every command resolves its configuration first, echoes it to the
output directory as ``config.json``, and re-running from that echoed file
reproduces all numeric outputs bitwise (wall-time fields aside).

Seeds: each stage derives its seed as ``seed XOR crc32(stage tag)``; per-item
trajectory seeds additionally fold in the record path, so outputs do not
depend on manifest ordering or worker count.

Exit codes: 0 success (within failure tolerances), 2 usage, 3 configuration,
4 data, 5 incompatible checkpoint, 6 per-item failures above threshold.
"""

from __future__ import annotations

import json
import sys
import time
from dataclasses import asdict
from pathlib import Path

import click
import numpy as np
import torch

from latte.analysis import delta_heatmaps, export_embeddings, interval_statistics
from latte.backend import ToyBackendSpec, load_backend, train_toy_backend
from latte.backbone import BackboneConfig
from latte.config import ConfigError, RunConfig, echo_config, load_config
from latte.data import (
    DataError,
    PerturbationSpec,
    load_manifest,
    synth_real_image,
    synth_toy_dataset,
)
from latte.fusion import AggregationConfig
from latte.model import (
    CheckpointError,
    DetectorConfig,
    TrajectoryDetector,
    load_checkpoint,
    save_checkpoint,
)
from latte.pipeline import build_bundle, evaluate_full, extract_to_store, settings_for, train_full
from latte.refiner import RefinerConfig
from latte.seeding import stage_seed
from latte.traineval import TrainConfig, write_history_csv
from latte.trajectory import TimestepPlan, select_timesteps

EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_FAILURES = 6


def _common(fn):
    fn = click.option("--config", "config_path", default=None, help="Config file (JSON/YAML).")(fn)
    fn = click.option("--set", "sets", multiple=True, metavar="SECTION.KEY=VALUE",
                      help="Override one config key.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Global seed override.")(fn)
    fn = click.option("--out", default=None, help="Output directory override.")(fn)
    fn = click.option("--workers", type=int, default=None, help="Loader parallelism.")(fn)
    return fn


def _resolve(config_path, sets, seed, out, workers) -> RunConfig:
    cfg = load_config(config_path, sets, seed, out, workers)
    torch.manual_seed(cfg.seed)
    echo_config(cfg, cfg.out)
    return cfg


def _write_summary(cfg: RunConfig, name: str, payload: dict, started: float) -> None:
    payload = dict(payload)
    payload["command"] = name
    payload["wall_time_s"] = time.perf_counter() - started
    path = Path(cfg.out) / "summary.json"
    path.write_text(json.dumps(payload, sort_keys=True, indent=2, default=str) + "\n")


def _fail(exc: Exception, code: int):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guarded(fn):
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            _fail(exc, EXIT_CONFIG)
        except CheckpointError as exc:
            _fail(exc, EXIT_CHECKPOINT)
        except DataError as exc:
            _fail(exc, EXIT_DATA)
        except (ValueError, FileNotFoundError) as exc:
            _fail(exc, EXIT_DATA)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _backend_spec(cfg: RunConfig) -> ToyBackendSpec:
    b = cfg.backend
    return ToyBackendSpec(
        image_size=b.image_size,
        latent_channels=b.latent_channels,
        width=b.width,
        depth=b.depth,
        ae_epochs=b.ae_epochs,
        denoiser_epochs=b.denoiser_epochs,
        batch_size=b.batch_size,
        learning_rate=b.learning_rate,
        num_steps=b.num_steps,
        beta_start=b.beta_start,
        beta_end=b.beta_end,
        seed=stage_seed(cfg.seed, "backend-train"),
    )


def _load_backend(cfg: RunConfig, recorded_path: str | None = None):
    checkpoint = cfg.backend.checkpoint or recorded_path
    if not checkpoint:
        raise ConfigError("backend.checkpoint is not set and the checkpoint records none")
    try:
        return load_backend(cfg.backend.kind, checkpoint)
    except FileNotFoundError as exc:
        raise ConfigError(f"backend checkpoint not found: {checkpoint}") from exc


def _plan(cfg: RunConfig, horizon: int) -> TimestepPlan:
    if cfg.trajectory.steps:
        return TimestepPlan(tuple(int(t) for t in cfg.trajectory.steps))
    return select_timesteps(cfg.trajectory.n, horizon)


def _detector_config(cfg: RunConfig, backend, plan: TimestepPlan) -> DetectorConfig:
    d = cfg.backbone.d
    backbone = BackboneConfig(
        kind=cfg.backbone.kind,
        d=d,
        fine_tune=cfg.backbone.fine_tune,
        input_size=(cfg.backbone.input_size, cfg.backbone.input_size),
        patch_size=cfg.backbone.patch_size,
        width=cfg.backbone.width,
        checkpoint=cfg.backbone.checkpoint,
    )
    refiner = RefinerConfig(
        d=d,
        n=plan.n,
        layers=cfg.refiner.layers,
        heads=cfg.refiner.heads,
        mode=cfg.refiner.mode,
        scale=cfg.refiner.scale,
        ffn_mult=cfg.refiner.ffn_mult,
    )
    aggregation = AggregationConfig(
        d=d,
        mode=cfg.aggregate.mode,
        n=plan.n,
        cls_positional=cfg.aggregate.cls_positional,
        cls_layers=cfg.aggregate.cls_layers,
        heads=cfg.refiner.heads,
    )
    return DetectorConfig(
        latent_shape=tuple(backend.latent_shape),
        backbone=backbone,
        refiner=refiner,
        aggregation=aggregation,
        use_visual=cfg.model.use_visual,
        use_latent=cfg.model.use_latent,
        use_refine=cfg.model.use_refine,
    )


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        batch_size=t.batch_size,
        learning_rate=t.learning_rate,
        weight_decay=t.weight_decay,
        max_epochs=t.max_epochs,
        patience=t.patience,
        lr_floor=t.lr_floor,
        seed=cfg.seed,
    )


def _perturb_from_json(raw: str | None) -> PerturbationSpec | None:
    if not raw:
        return None
    try:
        return PerturbationSpec.from_dict(json.loads(raw))
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise ConfigError(f"bad perturbation spec {raw!r}: {exc}") from exc


@click.group()
def main():
    """Latent-trajectory detector toolkit."""


@main.command()
@_common
@_guarded
def synth(config_path, sets, seed, out, workers):
    """Synthesize a balanced toy dataset (and train the toy backend)."""
    started = time.perf_counter()
    cfg = _resolve(config_path, sets, seed, out, workers)
    out_dir = Path(cfg.out)

    if cfg.backend.checkpoint:
        backend = _load_backend(cfg)
    else:
        rng = np.random.default_rng(stage_seed(cfg.seed, "backend-data"))
        train_count = max(64, cfg.data.count // 2)
        images = torch.stack(
            [
                torch.from_numpy(synth_real_image(rng, cfg.backend.image_size)).permute(2, 0, 1)
                for _ in range(train_count)
            ]
        ).float()
        backend = train_toy_backend(_backend_spec(cfg), images)
        backend.save(out_dir / "backend.ckpt")

    manifest = synth_toy_dataset(
        out_dir / "dataset",
        cfg.data.count,
        cfg.data.image_size,
        cfg.seed,
        backend,
        sample_steps=cfg.data.sample_steps,
        train_fraction=cfg.data.train_fraction,
        val_fraction=cfg.data.val_fraction,
    )
    _write_summary(
        cfg,
        "synth",
        {
            "count": len(manifest.records),
            "splits": manifest.counts(),
            "backend_fingerprint": backend.fingerprint(),
            "backend_summary": backend.summary,
            "manifest": str(out_dir / "dataset" / "manifest.jsonl"),
        },
        started,
    )


@main.command()
@_common
@click.option("--manifest", "manifest_path", required=True)
@click.option("--split", default="train")
@_guarded
def extract(config_path, sets, seed, out, workers, manifest_path, split):
    """Extract and persist trajectories for one manifest split."""
    started = time.perf_counter()
    cfg = _resolve(config_path, sets, seed, out, workers)
    manifest = load_manifest(manifest_path)
    backend = _load_backend(cfg)
    plan = _plan(cfg, backend.schedule.num_steps)
    result = extract_to_store(
        manifest, split, backend, plan, Path(cfg.out) / "trajectories", cfg.seed,
        workers=cfg.workers,
    )
    _write_summary(
        cfg,
        "extract",
        {**result, "plan": list(plan.steps), "split": split},
        started,
    )
    if len(result["failures"]) > cfg.data.max_failures:
        click.echo(
            f"error: {len(result['failures'])} extraction failures exceed "
            f"data.max_failures={cfg.data.max_failures}",
            err=True,
        )
        sys.exit(EXIT_FAILURES)


@main.command()
@_common
@click.option("--manifest", "manifest_path", required=True)
@_guarded
def train(config_path, sets, seed, out, workers, manifest_path):
    """Train the detector on the manifest's train/val splits."""
    started = time.perf_counter()
    cfg = _resolve(config_path, sets, seed, out, workers)
    manifest = load_manifest(manifest_path)
    backend = _load_backend(cfg)
    plan = _plan(cfg, backend.schedule.num_steps)
    model = TrajectoryDetector(_detector_config(cfg, backend, plan))
    result, _, _ = train_full(
        model, manifest, backend, plan, _train_config(cfg), cfg.seed,
        shared_eps=cfg.trajectory.shared_eps, workers=cfg.workers,
    )
    out_dir = Path(cfg.out)
    save_checkpoint(
        out_dir / "detector.ckpt",
        model,
        {
            "plan": list(plan.steps),
            "backend_fingerprint": backend.fingerprint(),
            "backend_checkpoint": cfg.backend.checkpoint,
            "train": asdict(_train_config(cfg)),
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_val_accuracy,
            "shared_eps": cfg.trajectory.shared_eps,
        },
    )
    write_history_csv(result.history, out_dir / "train_log.csv")
    from latte.plotting import render_history

    render_history(result.history, out_dir / "train_curve.png")
    _write_summary(
        cfg,
        "train",
        {
            "best_epoch": result.best_epoch,
            "best_val_accuracy": result.best_val_accuracy,
            "diverged": result.diverged,
            "epochs_run": len(result.history),
            "checkpoint": str(out_dir / "detector.ckpt"),
        },
        started,
    )


def _load_detector(cfg: RunConfig, checkpoint_path: str):
    model, extra = load_checkpoint(checkpoint_path)
    backend = _load_backend(cfg, extra.get("backend_checkpoint"))
    recorded = extra.get("backend_fingerprint")
    if recorded and backend.fingerprint() != recorded:
        raise CheckpointError(
            f"backend fingerprint {backend.fingerprint()} does not match the one "
            f"recorded at training time ({recorded})"
        )
    plan = TimestepPlan(tuple(int(t) for t in extra["plan"]))
    return model, backend, plan, extra


@main.command("eval")
@_common
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--manifest", "manifest_path", required=True)
@click.option("--split", default="test")
@click.option("--perturb", "perturb_json", default=None,
              help='JSON {"kind": ..., "param": ..., "seed": ...}')
@_guarded
def eval_cmd(config_path, sets, seed, out, workers, checkpoint_path, manifest_path, split,
             perturb_json):
    """Evaluate a checkpoint on one manifest split."""
    started = time.perf_counter()
    cfg = _resolve(config_path, sets, seed, out, workers)
    model, backend, plan, extra = _load_detector(cfg, checkpoint_path)
    manifest = load_manifest(manifest_path)
    perturbation = _perturb_from_json(perturb_json)
    metrics = evaluate_full(
        model, manifest, backend, plan, cfg.seed, split=split, perturbation=perturbation,
        shared_eps=bool(extra.get("shared_eps", False)), workers=cfg.workers,
    )
    payload = {
        "metrics": metrics,
        "split": split,
        "perturbation": perturbation.to_dict() if perturbation else None,
    }
    (Path(cfg.out) / "metrics.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2) + "\n"
    )
    _write_summary(cfg, "eval", payload, started)


@main.command()
@_common
@click.option("--cell", "cells", nargs=3, multiple=True, required=True,
              metavar="SOURCE CHECKPOINT MANIFEST")
@click.option("--split", default="test")
@_guarded
def matrix(config_path, sets, seed, out, workers, cells, split):
    """Pairwise train-source x test-source evaluation matrix."""
    started = time.perf_counter()
    cfg = _resolve(config_path, sets, seed, out, workers)
    sources = [c[0] for c in cells]
    if len(set(sources)) != len(sources):
        raise ConfigError("duplicate source names in --cell")
    detectors = {}
    manifests = {}
    for name, ckpt, man in cells:
        model, backend, plan, extra = _load_detector(cfg, ckpt)
        detectors[name] = (model, backend, plan, bool(extra.get("shared_eps", False)))
        manifests[name] = load_manifest(man)

    from latte.pipeline import matrix_from_sources
    from latte.plotting import render_matrix

    report = matrix_from_sources(detectors, manifests, cfg.seed, split=split,
                                 workers=cfg.workers)
    out_dir = Path(cfg.out)
    report.write_csv(out_dir / "matrix.csv")
    (out_dir / "matrix.json").write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
    )
    render_matrix(report, out_dir / "matrix.png")
    _write_summary(cfg, "matrix", report.to_dict(), started)


@main.command("perturb-eval")
@_common
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--manifest", "manifest_path", required=True)
@click.option("--split", default="test")
@_guarded
def perturb_eval(config_path, sets, seed, out, workers, checkpoint_path, manifest_path, split):
    """Accuracy-vs-strength sweep over the four perturbation kinds."""
    started = time.perf_counter()
    cfg = _resolve(config_path, sets, seed, out, workers)
    model, backend, plan, extra = _load_detector(cfg, checkpoint_path)
    manifest = load_manifest(manifest_path)
    grids = {
        "jpeg": cfg.perturb.jpeg,
        "crop_resize": cfg.perturb.crop_resize,
        "blur": cfg.perturb.blur,
        "noise": cfg.perturb.noise,
    }
    rows = []
    for kind, grid in grids.items():
        for param in grid:
            spec = PerturbationSpec(kind, float(param), stage_seed(cfg.seed, f"perturb-{kind}"))
            metrics = evaluate_full(
                model, manifest, backend, plan, cfg.seed, split=split, perturbation=spec,
                shared_eps=bool(extra.get("shared_eps", False)), workers=cfg.workers,
            )
            rows.append({"kind": kind, "param": float(param), **metrics})

    out_dir = Path(cfg.out)
    import csv as _csv

    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        writer = _csv.DictWriter(
            fh, fieldnames=["kind", "param", "accuracy", "average_precision", "count"]
        )
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    (out_dir / "sweep.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    from latte.plotting import render_sweep

    render_sweep(rows, out_dir / "sweep.png")
    _write_summary(cfg, "perturb-eval", {"rows": rows, "split": split}, started)


@main.command()
@_common
@click.option("--manifest", "manifest_path", required=True)
@click.option("--split", default="test")
@click.option("--checkpoint", "checkpoint_path", default=None,
              help="Detector checkpoint; enables the refined-token diagnostic.")
@click.option("--refined", is_flag=True,
              help="Also report pacing of the refined tokens (needs --checkpoint).")
@_guarded
def heatmap(config_path, sets, seed, out, workers, manifest_path, split, checkpoint_path,
            refined):
    """Per-class spatial correction heatmaps over consecutive timesteps."""
    started = time.perf_counter()
    cfg = _resolve(config_path, sets, seed, out, workers)
    manifest = load_manifest(manifest_path)
    detector = None
    if refined:
        if not checkpoint_path:
            raise ConfigError("--refined needs --checkpoint")
        model, backend, plan, extra = _load_detector(cfg, checkpoint_path)
        detector = model
    else:
        backend = _load_backend(cfg)
        plan = _plan(cfg, backend.schedule.num_steps)
    if plan.n < 2:
        raise ConfigError("heatmaps need a plan with at least two timesteps")

    from latte.analysis import refined_interval_magnitudes
    from latte.data import DatasetManifest, resize_image
    from latte.pipeline import load_record_image, record_seed
    from latte.plotting import render_heatmaps
    from latte.trajectory import extract_trajectory

    out_dir = Path(cfg.out)
    diagnostics = {}
    for label, name in ((0, "real"), (1, "fake")):
        records = [r for r in manifest.for_split(split) if r.label == label]
        if not records:
            continue
        trajectories = []
        for record in records:
            image = load_record_image(manifest, record)
            view = resize_image(image, (backend.image_size, backend.image_size))
            trajectories.append(
                extract_trajectory(view, plan, backend, record_seed(cfg.seed, record))
            )
        hm = delta_heatmaps(trajectories)
        hm.save(out_dir / f"heatmap_{name}.bin")
        render_heatmaps(hm, out_dir / f"heatmap_{name}.png", title=name)
        diagnostics[name] = interval_statistics(trajectories)
        if detector is not None:
            class_manifest = DatasetManifest(root=manifest.root, records=tuple(records))
            bundle = build_bundle(
                class_manifest, split, backend, plan, settings_for(detector.backbone, backend),
                cfg.seed, workers=cfg.workers,
            )
            diagnostics[name]["refined"] = refined_interval_magnitudes(detector, bundle)

    (out_dir / "diagnostics.json").write_text(
        json.dumps(diagnostics, sort_keys=True, indent=2) + "\n"
    )
    _write_summary(cfg, "heatmap", {"classes": sorted(diagnostics), "split": split}, started)


@main.command()
@_common
@click.option("--checkpoint", "checkpoint_path", required=True)
@click.option("--manifest", "manifest_path", required=True)
@click.option("--split", default="test")
@_guarded
def embed(config_path, sets, seed, out, workers, checkpoint_path, manifest_path, split):
    """Export fused embeddings for external 2-D projection."""
    started = time.perf_counter()
    cfg = _resolve(config_path, sets, seed, out, workers)
    model, backend, plan, extra = _load_detector(cfg, checkpoint_path)
    manifest = load_manifest(manifest_path)
    settings = settings_for(model.backbone, backend)
    bundle = build_bundle(
        manifest, split, backend, plan, settings, cfg.seed,
        shared_eps=bool(extra.get("shared_eps", False)), workers=cfg.workers,
    )
    table = export_embeddings(model, bundle)
    out_dir = Path(cfg.out)
    table.write_csv(out_dir / "embeddings.csv")
    table.save(out_dir / "embeddings.bin")
    _write_summary(
        cfg, "embed",
        {"rows": len(table.ids), "width": int(table.embeddings.shape[1]), "split": split},
        started,
    )


if __name__ == "__main__":
    main()
