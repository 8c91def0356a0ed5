"""``selenorm`` command line: one subcommand per pipeline stage plus ``pipeline``.

Every invocation resolves a configuration (profile defaults, then
``--config``, then flags), creates a timestamped run directory under the
output root and writes ``resolved_config.json`` there before doing any work.

Exit codes: 0 on success, 1 when a stage fails (one ``error:`` line naming the
stage and the error category goes to stderr), 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from . import pipeline as stages
from .config import PROFILES, apply_seed, output_root, resolve_config
from .errors import SelenormError

log = logging.getLogger("selenorm")

# flag -> (dest, config key, argparse kwargs); grouped by the subcommands that take them
SCENE_FLAGS = [
    ("--n-scenes", "n_scenes", {"type": int}),
    ("--split-fractions", "split_fractions", {"type": float, "nargs": 3}),
    ("--scene-size", "scene_spec.size", {"type": int, "nargs": 2}),
    ("--crater-density", "scene_spec.crater_density", {"type": float}),
    ("--noise-octaves", "scene_spec.noise_octaves", {"type": int}),
    ("--contrast", "scene_spec.contrast", {"type": float}),
    ("--tile-layout", "degradation_spec.tile_layout", {"type": int, "nargs": 2}),
    ("--gain-range", "degradation_spec.gain_range", {"type": float, "nargs": 2}),
    ("--bias-range", "degradation_spec.bias_range", {"type": float, "nargs": 2}),
    ("--gamma-range", "degradation_spec.gamma_range", {"type": float, "nargs": 2}),
    ("--gradient-amplitude", "degradation_spec.gradient_amplitude", {"type": float}),
    ("--seam-jitter", "degradation_spec.seam_jitter", {"type": int}),
    ("--noise-sigma", "degradation_spec.noise_sigma", {"type": float}),
]
CLAHE_FLAGS = [
    ("--tiles-x", "clahe_config.tiles_x", {"type": int}),
    ("--tiles-y", "clahe_config.tiles_y", {"type": int}),
    ("--clip-limit", "clahe_config.clip_limit", {"type": float}),
    ("--clahe-bins", "clahe_config.bins", {"type": int}),
    ("--apply-clahe", "apply_clahe", {"action": argparse.BooleanOptionalAction}),
]
MODEL_FLAGS = [
    ("--depth", "generator_config.depth", {"type": int}),
    ("--base-channels", "generator_config.base_channels", {"type": int}),
    ("--norm", "generator_config.norm", {"choices": ["instance", "batch"]}),
    ("--final-activation", "generator_config.final_activation", {"choices": ["tanh", "sigmoid"]}),
]
DISC_FLAGS = [
    ("--disc-layers", "discriminator_config.layers", {"type": int}),
    ("--disc-base-channels", "discriminator_config.base_channels", {"type": int}),
    ("--disc-norm", "discriminator_config.norm", {"choices": ["instance", "batch", "none"]}),
]
TRAIN_FLAGS = [
    ("--learning-rate", "train_config.learning_rate", {"type": float}),
    ("--beta1", "train_config.beta1", {"type": float}),
    ("--beta2", "train_config.beta2", {"type": float}),
    ("--batch-size", "train_config.batch_size", {"type": int}),
    ("--epochs", "train_config.epochs", {"type": int}),
    ("--lambda-l1", "train_config.lambda_l1", {"type": float}),
    ("--adv-weight", "train_config.adv_weight", {"type": float}),
    ("--patch-size", "train_config.patch_size", {"type": int}),
    ("--augment-hflip", "train_config.augment_hflip", {"action": argparse.BooleanOptionalAction}),
    ("--augment-intensity-scale", "train_config.augment_intensity_scale", {"type": float, "nargs": 2}),
    ("--checkpoint-every", "train_config.checkpoint_every", {"type": int}),
    ("--early-stop-patience", "train_config.early_stop_patience", {"type": int}),
    ("--d-steps", "train_config.d_steps", {"type": int}),
    ("--deterministic", "train_config.deterministic", {"action": argparse.BooleanOptionalAction}),
]
INFER_FLAGS = [
    ("--overlap", "inference_config.overlap", {"type": int}),
    ("--window", "inference_config.window", {"choices": ["flat", "linear_ramp", "gaussian"]}),
    ("--taper-param", "inference_config.taper_param", {"type": float}),
    ("--band-height", "inference_config.band_height", {"type": int}),
    ("--infer-batch-size", "inference_config.batch_size", {"type": int}),
]
BASELINE_FLAGS = [
    ("--block", "tone_balance_config.block", {"type": int, "nargs": 2}),
    ("--blend-margin", "tone_balance_config.blend_margin", {"type": int}),
    ("--histogram-bins", "histogram_bins", {"type": int}),
]


def _dest(flag: str) -> str:
    return "ov_" + flag.lstrip("-").replace("-", "_")


def _add_flags(parser, flags, title):
    group = parser.add_argument_group(title)
    for flag, key, kwargs in flags:
        extra = {"dest": _dest(flag), "default": None, **kwargs}
        if "action" not in kwargs:
            extra.setdefault("metavar", key.rsplit(".", 1)[-1].upper())
        group.add_argument(flag, help=f"override {key}", **extra)


def _common(parser):
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--profile", choices=PROFILES, help="named defaults (desk or paper)")
    parser.add_argument("--seed", type=int, help="root seed for scenes, degradations and training")
    parser.add_argument("--out", type=Path, help="output root (default: $SELENORM_OUT, then config output_dir)")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selenorm", description="Mosaic radiometric normalization toolkit.")
    p.add_argument("--version", action="version", version=f"selenorm {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a paired synthetic dataset")
    _common(s)
    _add_flags(s, SCENE_FLAGS, "dataset")

    s = sub.add_parser("preprocess", help="validity mask and CLAHE for one raster")
    _common(s)
    s.add_argument("--input", type=Path, required=True)
    s.add_argument("--output", type=Path, help="output raster (default: <run dir>/<input stem>_pre.tif)")
    s.add_argument("--nodata", type=float, help="value marking invalid pixels")
    s.add_argument("--border-trim", type=int, default=0)
    _add_flags(s, CLAHE_FLAGS, "clahe")

    s = sub.add_parser("train", help="train the generator/discriminator pair")
    _common(s)
    s.add_argument("--dataset", type=Path, required=True, help="dataset manifest.jsonl")
    s.add_argument("--lr", dest=_dest("--learning-rate"), type=float, default=None, help="alias of --learning-rate")
    _add_flags(s, TRAIN_FLAGS, "training")
    _add_flags(s, MODEL_FLAGS, "generator")
    _add_flags(s, DISC_FLAGS, "discriminator")
    _add_flags(s, CLAHE_FLAGS, "clahe")

    s = sub.add_parser("infer", help="normalize a raster or a dataset split with a checkpoint")
    _common(s)
    s.add_argument("--checkpoint", type=Path, required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="single raster to normalize")
    src.add_argument("--dataset", type=Path, help="dataset manifest; normalizes every pair of --split")
    s.add_argument("--output", type=Path, help="output raster for --input")
    s.add_argument("--split", default="test")
    s.add_argument("--patch-size", dest=_dest("--infer-patch-size"), type=int, default=None,
                   help="override inference_config.patch_size")
    s.add_argument("--depth", dest=_dest("--depth"), type=int, default=None,
                   help="must match the checkpoint")
    s.add_argument("--base-channels", dest=_dest("--base-channels"), type=int, default=None,
                   help="must match the checkpoint")
    _add_flags(s, INFER_FLAGS, "inference")
    _add_flags(s, CLAHE_FLAGS, "clahe")

    s = sub.add_parser("baseline", help="histogram matching or block tone balancing")
    _common(s)
    s.add_argument("--method", choices=stages.BASELINES, action="append",
                   help="baseline to run (repeatable; default: all)")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", type=Path, help="single raster")
    src.add_argument("--dataset", type=Path, help="dataset manifest")
    s.add_argument("--reference", type=Path, help="reference raster for --input")
    s.add_argument("--output", type=Path, help="output raster for --input")
    s.add_argument("--split", default="test")
    _add_flags(s, BASELINE_FLAGS, "baseline")

    s = sub.add_parser("eval", help="score prediction directories against dataset references")
    _common(s)
    s.add_argument("--dataset", type=Path, required=True)
    s.add_argument("--predictions", nargs="+", required=True, metavar="LABEL=DIR",
                   help="method label and directory of <pair_id>.slr rasters")
    s.add_argument("--split", default="test")
    s.add_argument("--histogram-bins", dest=_dest("--histogram-bins"), type=int, default=None)

    s = sub.add_parser("report", help="render the report bundle from an eval record")
    _common(s)
    s.add_argument("--eval", type=Path, required=True, help="eval.json written by the eval stage")

    s = sub.add_parser("pipeline", help="synth, train, infer, baseline, eval and report in one run")
    _common(s)
    s.add_argument("--lr", dest=_dest("--learning-rate"), type=float, default=None, help="alias of --learning-rate")
    s.add_argument("--infer-patch-size", dest=_dest("--infer-patch-size"), type=int, default=None,
                   help="override inference_config.patch_size")
    for flags, title in (
        (SCENE_FLAGS, "dataset"),
        (CLAHE_FLAGS, "clahe"),
        (TRAIN_FLAGS, "training"),
        (MODEL_FLAGS, "generator"),
        (DISC_FLAGS, "discriminator"),
        (INFER_FLAGS, "inference"),
        (BASELINE_FLAGS, "baseline"),
    ):
        _add_flags(s, flags, title)
    return p


ALL_FLAGS = {
    _dest(flag): key
    for group in (SCENE_FLAGS, CLAHE_FLAGS, MODEL_FLAGS, DISC_FLAGS, TRAIN_FLAGS, INFER_FLAGS, BASELINE_FLAGS)
    for flag, key, _ in group
}
ALL_FLAGS[_dest("--infer-patch-size")] = "inference_config.patch_size"


def collect_overrides(args) -> dict:
    out = {}
    for dest, key in ALL_FLAGS.items():
        value = getattr(args, dest, None)
        if value is not None:
            out[key] = list(value) if isinstance(value, list) else value
    return out


def resolve(args):
    overrides = collect_overrides(args)
    cfg = resolve_config(args.config, args.profile, overrides)
    if "inference_config.patch_size" in overrides and "inference_config.overlap" not in overrides:
        inf = cfg.inference_config
        cfg = replace(cfg, inference_config=replace(inf, overlap=inf.patch_size // 4))
    if args.seed is not None:
        cfg = apply_seed(cfg, args.seed)
    return cfg, overrides


def make_run_dir(root: Path, command: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S_%fZ")
    base = Path(root) / f"{command}-{stamp}"
    run, k = base, 1
    while run.exists():
        run = base.with_name(f"{base.name}-{k}")
        k += 1
    run.mkdir(parents=True)
    return run


def _write_resolved(run: Path, cfg, args, overrides):
    doc = {
        **cfg.to_dict(),
        "invocation": {
            "command": args.command,
            "overrides": overrides,
            "argv_config": str(args.config) if args.config else None,
            "version": __version__,
        },
    }
    (run / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _predictions(items):
    out = {}
    for item in items:
        label, sep, directory = item.partition("=")
        if not sep or not label or not directory:
            raise SelenormError(f"--predictions entries must look like LABEL=DIR, got {item!r}")
        out[label] = Path(directory)
    return out


def _run(args, cfg, run: Path) -> dict:
    from .rasterfile import read_raster, write_raster

    cmd = args.command
    if cmd == "synth":
        return {"manifest": str(stages.synth_stage(cfg, run / "dataset"))}
    if cmd == "preprocess":
        from .preprocess import preprocess_image

        image = read_raster(args.input)
        result = preprocess_image(
            image, cfg.clahe_config, cfg.apply_clahe, nodata_value=args.nodata, border_trim=args.border_trim
        )
        output = args.output or run / f"{args.input.stem}_pre.tif"
        write_raster(output, result)
        if result.validity_mask is not None:
            from .rasterfile import write_mask

            write_mask(Path(output).with_suffix(".mask.png"), result.validity_mask)
        return {"output": str(output)}
    if cmd == "train":
        art = stages.train_stage(cfg, args.dataset, run / "train")
        return {
            "manifest": str(art.manifest_path),
            "history": str(art.history_path),
            "best_epoch": art.best_epoch,
            "checkpoints": [str(p) for p in art.checkpoint_paths],
        }
    if cmd == "infer":
        from .inference import normalize_mosaic
        from .training import load_generator

        overrides = {"depth": getattr(args, _dest("--depth")), "base_channels": getattr(args, _dest("--base-channels"))}
        model, _ = load_generator(args.checkpoint, overrides)
        if args.dataset:
            return {"predictions": str(stages.infer_stage(cfg, args.dataset, args.checkpoint, run / "predictions", args.split))}
        image = stages.preprocess_input(cfg, read_raster(args.input))
        result = normalize_mosaic(image, model, cfg.inference_config)
        output = args.output or run / f"{args.input.stem}_normalized{args.input.suffix or '.tif'}"
        write_raster(output, result)
        return {"output": str(output)}
    if cmd == "baseline":
        methods = tuple(args.method or stages.BASELINES)
        if args.dataset:
            dirs = stages.baseline_stage(cfg, args.dataset, run / "baseline", args.split, methods)
            return {m: str(d) for m, d in dirs.items()}
        if args.reference is None:
            raise SelenormError("--input needs --reference")
        if len(methods) != 1 and args.output:
            raise SelenormError("--output with --input needs exactly one --method")
        degraded, reference = read_raster(args.input), read_raster(args.reference)
        outputs = {}
        for m in methods:
            result = stages.run_baseline(cfg, m, degraded, reference)
            output = args.output or run / f"{args.input.stem}_{m}{args.input.suffix or '.tif'}"
            write_raster(output, result)
            outputs[m] = str(output)
        return outputs
    if cmd == "eval":
        return {"eval": str(stages.eval_stage(cfg, args.dataset, _predictions(args.predictions), run / "eval", args.split))}
    if cmd == "report":
        bundle = stages.report_stage(cfg, args.eval, run / "report")
        return {"report": str(bundle.out_dir), "files": [str(p) for p in bundle.files()]}
    if cmd == "pipeline":
        return stages.run_pipeline(cfg, run)
    raise SelenormError(f"unknown command {cmd!r}")


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    stage = args.command
    try:
        stage = "config"
        cfg, overrides = resolve(args)
        stage = "setup"
        run = make_run_dir(output_root(args.out, cfg), args.command)
        _write_resolved(run, cfg, args, overrides)
        stage = args.command
        summary = _run(args, cfg, run)
    except SelenormError as exc:
        stage = getattr(exc, "stage", stage)
        print(f"selenorm: error: stage={stage} category={exc.category}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        stage = getattr(exc, "stage", stage)
        print(f"selenorm: error: stage={stage} category=io: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other stage crash still maps to exit 1
        log.debug("stage crash", exc_info=True)
        stage = getattr(exc, "stage", stage)
        print(f"selenorm: error: stage={stage} category=internal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    print(run)
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
