"""Stage functions shared by the CLI subcommands and the chained pipeline."""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .baselines import block_tone_balance, histogram_match, reference_targets
from .config import PipelineConfig
from .errors import ConfigurationError
from .inference import normalize_mosaic
from .metrics import evaluate_pair
from .preprocess import preprocess_image
from .raster import ImageGrid
from .rasterfile import read_container, write_container
from .report import make_report, read_metrics_csv
from .synth import make_paired_dataset, read_manifest
from .training import load_generator, read_history, train

log = logging.getLogger(__name__)

EVAL_SCHEMA = "selenorm.eval/1"
BASELINES = ("histogram_match", "tone_balance")
# strip order in the report figures
FIGURE_LABELS = ("degraded", "histogram_match", "model", "reference")


def synth_stage(cfg: PipelineConfig, out_dir) -> Path:
    out = Path(out_dir)
    make_paired_dataset(cfg.n_scenes, cfg.scene_spec, cfg.degradation_spec, cfg.split_fractions, out)
    return out / "manifest.jsonl"


def preprocess_input(cfg: PipelineConfig, image: ImageGrid, apply_clahe: bool | None = None) -> ImageGrid:
    use = cfg.apply_clahe if apply_clahe is None else apply_clahe
    return preprocess_image(image, cfg.clahe_config, apply_clahe=use)


def train_stage(cfg: PipelineConfig, manifest_path, out_dir):
    entries = read_manifest(manifest_path)
    return train(
        entries,
        cfg.train_config,
        cfg.generator_config,
        cfg.discriminator_config,
        out_dir,
        clahe_cfg=cfg.clahe_config,
        apply_clahe=cfg.apply_clahe,
        dataset_manifest_path=manifest_path,
        extra_manifest={"pipeline_config": cfg.to_dict()},
    )


def _split_entries(manifest_path, split):
    entries = [e for e in read_manifest(manifest_path) if split in (None, "all") or e.split == split]
    if not entries:
        raise ConfigurationError(f"no pairs in split {split!r} of {manifest_path}")
    return entries


def infer_stage(cfg: PipelineConfig, manifest_path, checkpoint, out_dir, split="test") -> Path:
    model, _ = load_generator(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e in _split_entries(manifest_path, split):
        image = preprocess_input(cfg, e.load_degraded())
        result = normalize_mosaic(image, model, cfg.inference_config)
        write_container(out / f"{e.pair_id}.slr", result.values.astype(np.float32))
    return out


def baseline_stage(cfg: PipelineConfig, manifest_path, out_dir, split="test", methods=BASELINES) -> dict:
    out = Path(out_dir)
    dirs = {}
    for method in methods:
        if method not in BASELINES:
            raise ConfigurationError(f"unknown baseline {method!r}; choose from {BASELINES}")
        dirs[method] = out / method
        dirs[method].mkdir(parents=True, exist_ok=True)
    for e in _split_entries(manifest_path, split):
        degraded, reference = e.load_degraded(), e.load_reference()
        for method in methods:
            result = run_baseline(cfg, method, degraded, reference)
            write_container(dirs[method] / f"{e.pair_id}.slr", result.values.astype(np.float32))
    return dirs


def run_baseline(cfg: PipelineConfig, method: str, degraded: ImageGrid, reference: ImageGrid) -> ImageGrid:
    if method == "histogram_match":
        return histogram_match(degraded, reference, cfg.histogram_bins)
    if method == "tone_balance":
        mean, std = reference_targets(reference)
        tb = cfg.tone_balance_config
        return block_tone_balance(
            degraded, type(tb)(**{**asdict(tb), "target_mean": mean, "target_std": max(std, 1e-6)})
        )
    raise ConfigurationError(f"unknown baseline {method!r}; choose from {BASELINES}")


def _prediction(directory, pair_id) -> np.ndarray:
    path = Path(directory) / f"{pair_id}.slr"
    if not path.exists():
        raise ConfigurationError(f"missing prediction {path}")
    return read_container(path).astype(np.float64)


def eval_stage(cfg: PipelineConfig, manifest_path, methods: dict, out_dir, split="test", extra=None) -> Path:
    """Score every method's predictions (plus the raw degraded input) against the references.

    ``methods`` maps a label to a directory of ``<pair_id>.slr`` rasters.
    Writes ``metrics.csv`` and ``eval.json`` (the report stage's input).
    """
    from .report import write_metrics_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = _split_entries(manifest_path, split)
    runs = {"degraded": []}
    runs.update({label: [] for label in methods})
    for e in entries:
        reference = e.load_reference()
        degraded = e.load_degraded()
        boundaries = e.boundaries(reference.shape)
        runs["degraded"].append(
            evaluate_pair(degraded.values, reference.values, boundaries, e.pair_id, "degraded", cfg.histogram_bins)
        )
        for label, directory in methods.items():
            pred = _prediction(directory, e.pair_id)
            runs[label].append(
                evaluate_pair(pred, reference.values, boundaries, e.pair_id, label, cfg.histogram_bins)
            )
    metrics_csv = out / "metrics.csv"
    write_metrics_csv(metrics_csv, list(runs.items()))
    record = {
        "schema": EVAL_SCHEMA,
        "dataset_manifest": str(Path(manifest_path).resolve()),
        "split": split,
        "methods": {label: str(Path(d).resolve()) for label, d in methods.items()},
        "metrics_csv": str(metrics_csv.resolve()),
        **(extra or {}),
    }
    eval_json = out / "eval.json"
    eval_json.write_text(json.dumps(record, indent=2, sort_keys=True))
    return eval_json


def report_header(cfg: PipelineConfig, extra=None) -> dict:
    inf = cfg.inference_config
    return {
        "profile": cfg.profile,
        "seed": cfg.seed,
        "inference": {"patch_size": inf.patch_size, "overlap": inf.overlap, "stride": inf.stride, "window": inf.window},
        "baselines": {
            "histogram_match": {"bins": cfg.histogram_bins, "target": "pair reference"},
            "tone_balance": {**cfg.tone_balance_config.to_dict(), "targets": "pair reference mean/std"},
        },
        "clahe": {"applied_to": "model inputs" if cfg.apply_clahe else "none", **asdict(cfg.clahe_config)},
        "config": cfg.to_dict(),
        **(extra or {}),
    }


def report_stage(cfg: PipelineConfig, eval_json, out_dir):
    record = json.loads(Path(eval_json).read_text())
    if record.get("schema") != EVAL_SCHEMA:
        raise ConfigurationError(f"{eval_json} is not an evaluation record")
    runs = read_metrics_csv(record["metrics_csv"])
    scenes = {}
    for e in _split_entries(record["dataset_manifest"], record["split"]):
        images = {"degraded": e.load_degraded().values}
        for label in FIGURE_LABELS[1:-1]:
            if label in record["methods"]:
                images[label] = _prediction(record["methods"][label], e.pair_id)
        images["reference"] = e.load_reference().values
        scenes[e.pair_id] = images
    history = read_history(record["history_path"]) if record.get("history_path") else None
    header = report_header(cfg, {k: record[k] for k in ("checkpoint", "best_epoch", "checkpoint_selection") if k in record})
    return make_report(runs, out_dir, scenes=scenes, header=header, history=history)


@contextmanager
def stage_scope(name: str):
    """Tag any exception escaping the block with the stage it came from."""
    try:
        yield
    except Exception as exc:
        if not hasattr(exc, "stage"):
            exc.stage = name
        raise


def run_pipeline(cfg: PipelineConfig, run_dir) -> dict:
    """synth -> train -> infer -> baseline -> eval -> report inside ``run_dir``."""
    run = Path(run_dir)
    stages = {}
    with stage_scope("synth"):
        stages["synth"] = manifest = synth_stage(cfg, run / "dataset")
    with stage_scope("train"):
        artifacts = train_stage(cfg, manifest, run / "train")
    stages["train"] = artifacts.manifest_path
    ckpts = artifacts.out_dir / "checkpoints"
    best = ckpts / "best.ckpt"
    with stage_scope("infer"):
        methods = {"model": infer_stage(cfg, manifest, best, run / "infer" / "model")}
        if artifacts.best_epoch != len(artifacts.loss_history):
            methods["model_last"] = infer_stage(cfg, manifest, ckpts / "last.ckpt", run / "infer" / "model_last")
    stages["infer"] = run / "infer"
    with stage_scope("baseline"):
        methods.update(baseline_stage(cfg, manifest, run / "baseline"))
    stages["baseline"] = run / "baseline"
    with stage_scope("eval"):
        stages["eval"] = eval_json = eval_stage(
            cfg,
            manifest,
            methods,
            run / "eval",
            extra={
                "checkpoint": str(best.resolve()),
                "best_epoch": artifacts.best_epoch,
                "checkpoint_selection": "minimum validation total loss",
                "history_path": str(artifacts.history_path.resolve()),
            },
        )
    with stage_scope("report"):
        stages["report"] = report_stage(cfg, eval_json, run / "report").out_dir
    return {k: str(v) for k, v in stages.items()}
