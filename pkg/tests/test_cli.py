import json
import os
from pathlib import Path

import numpy as np
import pytest

from wsloc.cli import dispatch
from wsloc.data import load_dataset, load_manifest
from wsloc.store import save_image_file


def run(*argv):
    return dispatch(list(argv))


def test_help_exits_zero(capsys):
    assert run("--help") == 0
    assert "dataset" in capsys.readouterr().out


def test_unknown_subcommand_exits_two(capsys):
    assert run("frobnicate") == 2


def test_missing_subcommand_exits_two(capsys):
    assert run() == 2


def test_runtime_error_exits_one(tmp_path, capsys):
    code = run("dataset", "filter", "--manifest", str(tmp_path / "nope.jsonl"),
               "--min-px", "256", "--out", str(tmp_path / "out"))
    assert code == 1
    assert "error [ManifestError]" in capsys.readouterr().err


def test_out_dir_env_override(tmp_path, monkeypatch):
    data_dir = tmp_path / "data"
    assert run("synth", "generate", "--classes", "2", "--per-class", "3",
               "--image-size", "32", "--seed", "4", "--out", str(data_dir)) == 0
    out_dir = tmp_path / "filtered"
    monkeypatch.setenv("WSLOC_OUT", str(out_dir))
    assert run("dataset", "filter", "--manifest", str(data_dir / "manifest.jsonl"),
               "--min-px", "16") == 0
    assert (out_dir / "manifest.jsonl").exists()


def test_dataset_split_and_mix(tmp_path):
    data_dir = tmp_path / "data"
    assert run("synth", "generate", "--classes", "2", "--per-class", "10",
               "--image-size", "32", "--seed", "4", "--out", str(data_dir)) == 0
    split_dir = tmp_path / "split"
    assert run("dataset", "split", "--manifest", str(data_dir / "manifest.jsonl"),
               "--val-frac", "0.2", "--seed", "1", "--out", str(split_dir)) == 0
    train = load_manifest(split_dir / "train.jsonl")
    val = load_manifest(split_dir / "val.jsonl")
    assert len(train.records) == 16 and len(val.records) == 4

    spec = {
        "description": "half",
        "components": [{"manifest": str(data_dir / "manifest.jsonl"), "fraction": 0.5, "seed": 3}],
    }
    spec_path = tmp_path / "mix.cfg"
    spec_path.write_text(json.dumps(spec))
    mix_dir = tmp_path / "mixed"
    assert run("dataset", "mix", "--spec", str(spec_path), "--out", str(mix_dir)) == 0
    assert len(load_manifest(mix_dir / "manifest.jsonl").records) == 10


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> train base -> train wsl -> eval -> sweep -> cam, tiny scale."""
    root = tmp_path_factory.mktemp("pipeline")
    train_dir = root / "train-data"
    test_dir = root / "test-data"
    assert run("synth", "generate", "--classes", "5", "--per-class", "8",
               "--image-size", "32", "--cross-cat", "0.2", "--cross-dom", "0.1",
               "--seed", "5", "--name", "pool", "--out", str(train_dir)) == 0
    assert run("synth", "generate", "--classes", "5", "--per-class", "4",
               "--image-size", "32", "--seed", "6", "--clean", "--name", "testset",
               "--out", str(test_dir)) == 0

    base_dir = root / "base"
    assert run("train", "base", "--data", str(train_dir), "--epochs", "1",
               "--batch-size", "16", "--lr-backbone", "0.001", "--seed", "0",
               "--val-frac", "0.2", "--out", str(base_dir)) == 0

    wsl_dir = root / "wsl"
    assert run("train", "wsl", "--base", str(base_dir / "checkpoint.npz"),
               "--data", str(train_dir), "--epochs", "1", "--batch-size", "16",
               "--seed", "0", "--val-frac", "0.2", "--out", str(wsl_dir)) == 0

    eval_dir = root / "eval"
    assert run("eval", "--ckpt", str(wsl_dir / "checkpoint.npz"),
               "--data", str(test_dir), "--out", str(eval_dir)) == 0

    sweep_cfg = {
        "pools": {"pool": str(train_dir)},
        "specs": [
            {"description": "all", "components": [{"manifest": "pool", "fraction": 1.0, "seed": 1}]},
            {"description": "half", "components": [{"manifest": "pool", "fraction": 0.5, "seed": 2}]},
        ],
        "val_fraction": 0.2,
        "base": {"batch_size": 16, "epochs": 1, "lr_backbone": 1e-3, "seed": 0},
        "wsl": {"batch_size": 16, "epochs": 1, "seed": 0},
    }
    specs_path = root / "sweeps.cfg"
    specs_path.write_text(json.dumps(sweep_cfg))
    sweep_dir = root / "sweep"
    assert run("sweep", "run", "--specs", str(specs_path), "--test", str(test_dir),
               "--out", str(sweep_dir)) == 0

    manifest, store = load_dataset(test_dir)
    image_path = root / "sample.png"
    save_image_file(image_path, store[manifest.records[0].path])
    cam_dir = root / "cam"
    assert run("cam", "--image", str(image_path), "--ckpt", str(wsl_dir / "checkpoint.npz"),
               "--class-k", str(manifest.records[0].label), "--tau", "0.2",
               "--out", str(cam_dir / "overlay.png"), "--boxes", str(cam_dir / "boxes.csv")) == 0
    return {
        "root": root, "train": train_dir, "test": test_dir, "base": base_dir,
        "wsl": wsl_dir, "eval": eval_dir, "sweep": sweep_dir, "cam": cam_dir,
        "specs": specs_path,
    }


def test_every_command_writes_a_run_manifest(pipeline):
    for key in ("train", "test", "base", "wsl", "eval", "sweep", "cam"):
        assert (pipeline[key] / "run_manifest.json").exists(), key


def test_run_manifests_cross_reference_inputs(pipeline):
    base_rm = json.loads((pipeline["base"] / "run_manifest.json").read_text())
    assert str(pipeline["train"]) in base_rm["inputs"]
    wsl_rm = json.loads((pipeline["wsl"] / "run_manifest.json").read_text())
    assert str(pipeline["base"] / "checkpoint.npz") in wsl_rm["inputs"]
    eval_rm = json.loads((pipeline["eval"] / "run_manifest.json").read_text())
    assert str(pipeline["wsl"] / "checkpoint.npz") in eval_rm["inputs"]
    sweep_rm = json.loads((pipeline["sweep"] / "run_manifest.json").read_text())
    assert str(pipeline["test"]) in sweep_rm["inputs"]
    for rm in (base_rm, wsl_rm, eval_rm, sweep_rm):
        assert rm["tool_version"]
        assert "resolved_config" in rm and rm["duration_seconds"] >= 0


def test_expected_artifacts_exist(pipeline):
    assert (pipeline["base"] / "history.csv").exists()
    assert (pipeline["sweep"] / "sweep.csv").exists()
    assert (pipeline["sweep"] / "sweep.png").exists()
    assert (pipeline["sweep"] / "provenance.json").exists()
    assert (pipeline["cam"] / "overlay.png").exists()
    boxes = (pipeline["cam"] / "boxes.csv").read_text().splitlines()
    assert boxes[0] == "id,class,x,y,w,h,score"
    metrics = (pipeline["eval"] / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "metric,value"
    assert any(line.startswith("top1,") for line in metrics)


def test_sweep_rerun_reproduces_metrics_csv(pipeline, tmp_path):
    rerun_dir = tmp_path / "sweep-rerun"
    assert run("sweep", "run", "--specs", str(pipeline["specs"]),
               "--test", str(pipeline["test"]), "--out", str(rerun_dir)) == 0
    original = (pipeline["sweep"] / "sweep.csv").read_bytes()
    rerun = (rerun_dir / "sweep.csv").read_bytes()
    assert original == rerun


def test_train_config_file_with_flag_precedence(pipeline, tmp_path):
    cfg_path = tmp_path / "train.cfg"
    cfg_path.write_text(json.dumps({"epochs": 1, "batch_size": 8, "seed": 9}))
    out_dir = tmp_path / "trained"
    assert run("train", "base", "--data", str(pipeline["train"]), "--config", str(cfg_path),
               "--batch-size", "16", "--val-frac", "0", "--out", str(out_dir)) == 0
    rm = json.loads((out_dir / "run_manifest.json").read_text())
    assert rm["resolved_config"]["train_config"]["batch_size"] == 16  # flag wins
    assert rm["resolved_config"]["train_config"]["seed"] == 9  # file wins over default
