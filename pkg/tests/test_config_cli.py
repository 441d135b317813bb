import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from autoseg3d.cli import main
from autoseg3d.config import OUTPUT_ROOT_ENV, dump_run_config, load_run_config
from autoseg3d.errors import ConfigError
from autoseg3d.volumes import load_volume, read_manifest


def write_dataset_spec(path, cases=6, splits=None, grid=16, noise=10.0, seed=7,
                       fmt="nii.gz"):
    spec = {
        "cases": cases,
        "splits": splits or {"train": 4, "val": 2},
        "file_format": fmt,
        "phantom": {
            "grid_shape": [grid, grid, grid],
            "num_organs": 1,
            "noise_sigma": noise,
            "radius_range": [3, 4],
            "seed": seed,
        },
    }
    path.write_text(yaml.safe_dump(spec))
    return path


def write_run_config(path, manifest, out_dir, epochs=2, grid=16):
    cfg = {
        "seed": 5,
        "output_dir": str(out_dir),
        "data": {"manifest": str(manifest), "preset": "btcv"},
        "encoder": {
            "embed_dim": 8, "num_blocks": 4, "num_heads": 2, "patch_kernel": 4,
            "window_size": 4, "token_grid": [grid // 4] * 3, "neck_channels": 4,
            "mlp_ratio": 2.0,
        },
        "apg": {"base_channels": 4, "max_channels": 8, "out_channels": 4},
        "decoder": {"fusion_channels": 4, "num_classes": 1},
        "optim": {"epochs": epochs, "warmup_epochs": 0 if epochs < 2 else 1,
                  "batch_size": 2, "patch_size": [grid] * 3, "validate_every": 1},
        "patches": {"patch_size": [grid] * 3, "count": 2},
        "infer": {"patch_size": [grid] * 3},
    }
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture
def dataset(tmp_path):
    spec = write_dataset_spec(tmp_path / "spec.yaml")
    assert main(["synth", str(spec), "--out", str(tmp_path / "data")]) == 0
    return tmp_path / "data" / "manifest.csv"


# --- config loading -----------------------------------------------------------

def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"seed": 1, "typo_key": 2}))
    with pytest.raises(ConfigError, match="typo_key"):
        load_run_config(path)


def test_nested_unknown_key_rejected(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"encoder": {"embed_dims": 32}}))
    with pytest.raises(ConfigError, match="embed_dims"):
        load_run_config(path)


def test_config_round_trip_is_noop(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"seed": 9, "encoder": {"embed_dim": 16,
                                                           "num_heads": 2}}))
    cfg = load_run_config(path)
    dumped = tmp_path / "dumped.yaml"
    dump_run_config(cfg, dumped)
    again = load_run_config(dumped)
    assert again == cfg
    dumped2 = tmp_path / "dumped2.yaml"
    dump_run_config(again, dumped2)
    assert dumped.read_text() == dumped2.read_text()


def test_output_root_env(tmp_path, monkeypatch):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump({"output_dir": "runs/x"}))
    cfg = load_run_config(path)
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cfg.resolved_output_dir() == tmp_path / "root" / "runs" / "x"


# --- synth ----------------------------------------------------------------------

def test_synth_writes_manifest_and_cases(tmp_path, dataset):
    entries = read_manifest(dataset)
    assert len(entries) == 6
    assert sum(e.split == "train" for e in entries) == 4
    base = dataset.parent
    for e in entries:
        vol, _ = load_volume(base / e.image)
        assert vol.shape == (16, 16, 16)


def test_synth_rerun_hash_identical(tmp_path):
    spec = write_dataset_spec(tmp_path / "spec.yaml")
    assert main(["synth", str(spec), "--out", str(tmp_path / "d1")]) == 0
    assert main(["synth", str(spec), "--out", str(tmp_path / "d2")]) == 0
    for e in read_manifest(tmp_path / "d1" / "manifest.csv"):
        b1 = (tmp_path / "d1" / e.image).read_bytes()
        b2 = (tmp_path / "d2" / e.image).read_bytes()
        assert hashlib.sha256(b1).hexdigest() == hashlib.sha256(b2).hexdigest()


def test_synth_invalid_spec_names_field(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"cases": 2, "splits": {"train": 2},
                                   "phantom": {"shape_family": "torus"}}))
    code = main(["synth", str(bad), "--out", str(tmp_path / "d")])
    assert code == 2
    assert "shape_family" in capsys.readouterr().err


def test_synth_unknown_spec_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"cases": 2, "num_cases": 2}))
    assert main(["synth", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "num_cases" in capsys.readouterr().err


# --- params / ablate ---------------------------------------------------------------

def test_params_reports_tunable_below_frozen_at_defaults(tmp_path, dataset, capsys):
    cfg = {"seed": 1, "output_dir": str(tmp_path / "out"),
           "data": {"manifest": str(dataset), "preset": "btcv"}}
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["params", str(path)]) == 0
    out = capsys.readouterr().out
    tunable = int(out.split("tunable parameters: ")[1].split(" ")[0])
    frozen = int(out.split("frozen parameters:  ")[1].split(" ")[0])
    assert tunable < frozen


def test_ablate_orders_counts(tmp_path, dataset, capsys):
    path = write_run_config(tmp_path / "cfg.yaml", dataset, tmp_path / "out")
    assert main(["ablate", str(path)]) == 0
    assert "ok" in capsys.readouterr().out


# --- train / eval / infer ------------------------------------------------------------

def test_train_eval_infer_pipeline(tmp_path, dataset, capsys):
    out = tmp_path / "run"
    cfg_path = write_run_config(tmp_path / "cfg.yaml", dataset, out)
    assert main(["train", str(cfg_path)]) == 0
    assert (out / "config.effective.yaml").exists()
    assert (out / "params_report.txt").exists()
    assert (out / "training_log.jsonl").exists()
    final = out / "checkpoint_final.ckpt"
    assert final.exists()

    assert main(["eval", str(cfg_path), "--checkpoint", str(final),
                 "--split", "val"]) == 0
    assert (out / "metrics_val.jsonl").exists()
    records = [json.loads(l) for l in (out / "metrics_val.jsonl").read_text().splitlines()]
    assert records[-1]["type"] == "aggregate"

    assert main(["infer", str(cfg_path), "--checkpoint", str(final),
                 "--split", "val"]) == 0
    preds = list((out / "predictions").glob("*.nii.gz"))
    assert len(preds) == 2


def test_train_ablation_flags_build_reduced_model(tmp_path, dataset, capsys):
    out = tmp_path / "run_off"
    cfg_path = write_run_config(tmp_path / "cfg.yaml", dataset, out, epochs=1)
    assert main(["train", str(cfg_path), "--no-apg", "--no-mlam"]) == 0
    effective = yaml.safe_load((out / "config.effective.yaml").read_text())
    assert effective["decoder"]["apg_enabled"] is False
    assert effective["decoder"]["mlam_enabled"] is False
    from autoseg3d.model import load_model_checkpoint
    model, meta = load_model_checkpoint(out / "checkpoint_final.ckpt")
    assert meta["apg_enabled"] is False and meta["mlam_enabled"] is False
    assert model.apg is None
    assert not any(n.startswith("apg.") for n, _ in model.named_parameters())


def test_eval_flag_mismatch_refused(tmp_path, dataset, capsys):
    out = tmp_path / "run_mismatch"
    cfg_path = write_run_config(tmp_path / "cfg.yaml", dataset, out, epochs=1)
    assert main(["train", str(cfg_path), "--no-apg"]) == 0
    code = main(["eval", str(cfg_path), "--checkpoint",
                 str(out / "checkpoint_final.ckpt"), "--split", "val"])
    assert code == 2
    assert "apg_enabled" in capsys.readouterr().err


def test_eval_missing_checkpoint_exits_3(tmp_path, dataset, capsys):
    cfg_path = write_run_config(tmp_path / "cfg.yaml", dataset, tmp_path / "o", epochs=1)
    code = main(["eval", str(cfg_path), "--checkpoint",
                 str(tmp_path / "absent.ckpt"), "--split", "val"])
    assert code == 3


def test_train_bad_config_exits_2_before_compute(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"optim": {"epochs": 0}}))
    assert main(["train", str(bad)]) == 2


def test_preprocess_command(tmp_path, dataset):
    out = tmp_path / "pp"
    cfg_path = write_run_config(tmp_path / "cfg.yaml", dataset, out)
    assert main(["preprocess", str(cfg_path)]) == 0
    new_manifest = out / "preprocessed" / "manifest.csv"
    assert new_manifest.exists()
    entries = read_manifest(new_manifest)
    vol, _ = load_volume(out / "preprocessed" / entries[0].image)
    assert vol.data.min() >= 0.0 and vol.data.max() <= 1.0
