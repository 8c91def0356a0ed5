"""Command-line behaviour: exit codes, precedence, run directories."""

import json
from pathlib import Path

import pytest

from selenorm.cli import run_cli

TINY = {
    "n_scenes": 4,
    "split_fractions": [0.5, 0.25, 0.25],
    "scene_spec": {"size": [128, 128]},
    "train_config": {"patch_size": 32, "epochs": 1, "batch_size": 4},
    "generator_config": {"depth": 3, "base_channels": 4},
    "discriminator_config": {"layers": 2, "base_channels": 4},
    "inference_config": {"patch_size": 32, "overlap": 8},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def only_run(root: Path, command: str) -> Path:
    (run,) = root.glob(f"{command}-*")
    return run


def test_usage_errors_exit_2(capsys):
    assert run_cli([]) == 2
    assert run_cli(["train"]) == 2
    assert run_cli(["synth", "--n-scenes", "many"]) == 2
    assert run_cli(["frobnicate"]) == 2


def test_stage_failure_exit_1(tmp_path, capsys):
    code = run_cli(["train", "--dataset", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("selenorm: error: stage=train category=")


def test_config_failure_names_config_stage(tmp_path, capsys):
    assert run_cli(["synth", "--n-scenes", "2", "--out", str(tmp_path)]) == 1
    assert "stage=config category=configuration" in capsys.readouterr().err


def test_synth_seed_reproducible(tmp_path, tiny_config, capsys):
    for name in ("a", "b"):
        assert run_cli(["synth", "--config", str(tiny_config), "--seed", "7", "--out", str(tmp_path / name)]) == 0
    a = only_run(tmp_path / "a", "synth") / "dataset"
    b = only_run(tmp_path / "b", "synth") / "dataset"
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_out_env(tmp_path, tiny_config, monkeypatch, capsys):
    monkeypatch.setenv("SELENORM_OUT", str(tmp_path / "envroot"))
    assert run_cli(["synth", "--config", str(tiny_config)]) == 0
    run = only_run(tmp_path / "envroot", "synth")
    assert capsys.readouterr().out.strip() == str(run)
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["n_scenes"] == 4
    assert resolved["invocation"]["command"] == "synth"
    assert (run / "summary.json").exists()


def test_train_flag_beats_config(tmp_path, tiny_config, capsys):
    cfg = dict(TINY, train_config={**TINY["train_config"], "learning_rate": 0.005})
    tiny_config.write_text(json.dumps(cfg))
    assert run_cli(["synth", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    manifest = only_run(tmp_path, "synth") / "dataset" / "manifest.jsonl"
    assert run_cli(["train", "--dataset", str(manifest), "--lr", "0.001", "--config", str(tiny_config), "--out", str(tmp_path)]) == 0
    run = only_run(tmp_path, "train")
    recorded = json.loads((run / "train" / "run_manifest.json").read_text())
    assert recorded["train_config"]["learning_rate"] == 0.001
    assert json.loads((run / "resolved_config.json").read_text())["train_config"]["learning_rate"] == 0.001


def test_stage_commands_chain(tmp_path, tiny_config, capsys):
    out = str(tmp_path)
    common = ["--config", str(tiny_config), "--out", out]
    assert run_cli(["synth", *common]) == 0
    manifest = only_run(tmp_path, "synth") / "dataset" / "manifest.jsonl"
    assert run_cli(["train", "--dataset", str(manifest), *common]) == 0
    ckpt = only_run(tmp_path, "train") / "train" / "checkpoints" / "best.ckpt"
    assert run_cli(["infer", "--checkpoint", str(ckpt), "--dataset", str(manifest), *common]) == 0
    preds = only_run(tmp_path, "infer") / "predictions"
    assert run_cli(["infer", "--checkpoint", str(ckpt), "--dataset", str(manifest), "--depth", "5", *common]) == 1
    assert "category=configuration" in capsys.readouterr().err
    assert run_cli(["baseline", "--dataset", str(manifest), "--method", "histogram_match", *common]) == 0
    hm = only_run(tmp_path, "baseline") / "baseline" / "histogram_match"
    assert run_cli(["eval", "--dataset", str(manifest), "--predictions", f"model={preds}", f"histogram_match={hm}", *common]) == 0
    eval_json = only_run(tmp_path, "eval") / "eval" / "eval.json"
    assert run_cli(["report", "--eval", str(eval_json), *common]) == 0
    report = only_run(tmp_path, "report") / "report"
    assert (report / "metrics.csv").exists() and (report / "figures" / "psnr_by_method.png").exists()


def test_single_raster_commands(tmp_path, rng, capsys):
    import numpy as np

    from selenorm.rasterfile import read_raster, write_raster
    from selenorm.raster import ImageGrid

    src = tmp_path / "in.png"
    ref = tmp_path / "ref.png"
    write_raster(src, ImageGrid(rng.random((64, 64)) * 0.5))
    write_raster(ref, ImageGrid(rng.random((64, 64))))
    out = tmp_path / "matched.png"
    assert run_cli(["baseline", "--input", str(src), "--reference", str(ref), "--method", "histogram_match", "--output", str(out), "--out", str(tmp_path)]) == 0
    assert read_raster(out).shape == (64, 64)
    pre = tmp_path / "pre.tif"
    assert run_cli(["preprocess", "--input", str(src), "--output", str(pre), "--tiles-x", "4", "--tiles-y", "4", "--out", str(tmp_path)]) == 0
    assert np.ptp(read_raster(pre).values) > np.ptp(read_raster(src).values)


def test_resolved_config_reproduces_run(tmp_path, tiny_config, capsys):
    assert run_cli(["synth", "--config", str(tiny_config), "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    first = only_run(tmp_path / "a", "synth")
    assert run_cli(["synth", "--config", str(first / "resolved_config.json"), "--out", str(tmp_path / "b")]) == 0
    second = only_run(tmp_path / "b", "synth")
    assert (first / "dataset" / "manifest.jsonl").read_bytes() == (second / "dataset" / "manifest.jsonl").read_bytes()
