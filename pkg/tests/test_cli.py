import configparser
import json
from pathlib import Path

import numpy as np
import pytest

from voxelseg.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from voxelseg.volio import read_mask, read_volume

TINY = ["--base-channels", "4", "--patch", "3,43,43", "--tile", "1,21,21", "--batch-size", "2",
        "--iterations", "3", "--patches-per-epoch", "6", "--epochs", "2", "--lr", "1e-3"]


def tree(root: Path) -> dict:
    """File contents by relative path; the resolved config records the out path and is skipped."""
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "resolved_config.ini"}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    rc = main(["phantom-gen", "--malignant", "24", "--benign", "8", "--seed", "3", "--val-fraction", "0.125",
               "--test-fraction", "0.75", "--out", str(d)])
    assert rc == EXIT_OK
    return d


@pytest.fixture(scope="module")
def model(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--manifest", str(data), "--out", str(out)] + TINY) == EXIT_OK
    return out


# --- phantom-gen --------------------------------------------------------------


def test_phantom_gen_counts_and_repeat(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["phantom-gen", "--malignant", "4", "--benign", "4", "--seed", "1", "--out", str(a)]) == EXIT_OK
    m = json.loads((a / "manifest.json").read_text())
    assert len(m["exams"]) == 8 and len(list((a / "exams").iterdir())) == 8
    assert main(["phantom-gen", "--malignant", "4", "--benign", "4", "--seed", "1", "--out", str(b)]) == EXIT_OK
    assert tree(a) == tree(b)


def test_missing_out_is_usage_error(capsys):
    assert main(["phantom-gen", "--malignant", "1"]) == EXIT_USAGE
    assert "missing required" in capsys.readouterr().err


def test_unknown_subcommand_and_flag():
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["phantom-gen", "--out", "x", "--bogus", "1"]) == EXIT_USAGE


def test_config_file_and_env_seed(tmp_path, monkeypatch):
    ini = tmp_path / "c.ini"
    ini.write_text("[phantom-gen]\nmalignant = 1\nbenign = 1\nseed = 5\n")
    out = tmp_path / "o"
    monkeypatch.setenv("VOXELSEG_SEED", "9")
    assert main(["phantom-gen", "--config", str(ini), "--benign", "2", "--out", str(out)]) == EXIT_OK
    cp = configparser.ConfigParser()
    cp.read(out / "resolved_config.ini")
    sec = cp["phantom-gen"]
    assert sec["malignant"] == "1" and sec["benign"] == "2" and sec["seed"] == "9"


def test_config_rejects_unknown_keys(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[phantom-gen]\nmalignnt = 1\n")
    assert main(["phantom-gen", "--config", str(ini), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    ini.write_text("[nonsense]\na = 1\n")
    assert main(["phantom-gen", "--config", str(ini), "--out", str(tmp_path / "o")]) == EXIT_USAGE


# --- harmonize ----------------------------------------------------------------


@pytest.mark.parametrize("style", ["exam", "scanner"])
def test_harmonize_writes_channels(data, tmp_path, style):
    out = tmp_path / style
    assert main(["harmonize", "--manifest", str(data), "--out", str(out), "--style", style,
                 "--partition", "train"]) == EXIT_OK
    exams = [p for p in out.iterdir() if p.is_dir() and p.name != "maps"]
    assert len(exams) == 4
    assert read_volume(exams[0] / "dce_out").dims == (12, 64, 64)
    assert (out / "maps").is_dir() == (style == "scanner")


def test_harmonize_bad_style(data, tmp_path):
    assert main(["harmonize", "--manifest", str(data), "--out", str(tmp_path), "--style", "bogus"]) == EXIT_USAGE


# --- train --------------------------------------------------------------------


def test_train_outputs(model):
    log = (model / "log.csv").read_text().strip().splitlines()
    assert len(log) == 3
    for name in ("checkpoint.ckpt", "init.ckpt", "census.json", "model.json", "resolved_config.ini"):
        assert (model / name).is_file()
    census = json.loads((model / "census.json").read_text())
    assert sum(1 for l in census["layers"] if l["kind"] == "conv") == 16


def test_resolved_config_reruns_identically(model, data, tmp_path):
    out = tmp_path / "again"
    assert main(["train", "--config", str(model / "resolved_config.ini"), "--out", str(out)]) == EXIT_OK
    assert (out / "checkpoint.ckpt").read_bytes() == (model / "checkpoint.ckpt").read_bytes()
    assert (out / "log.csv").read_text() == (model / "log.csv").read_text()


def test_zero_lr_keeps_initialization(data, tmp_path):
    args = [a if a != "1e-3" else "0" for a in TINY]
    assert main(["train", "--manifest", str(data), "--out", str(tmp_path)] + args) == EXIT_OK
    assert (tmp_path / "checkpoint.ckpt").read_bytes() == (tmp_path / "init.ckpt").read_bytes()


def test_train_patch_budget_mismatch(data, tmp_path):
    args = TINY[:-6] + ["--patches-per-epoch", "100", "--epochs", "1"]
    assert main(["train", "--manifest", str(data), "--out", str(tmp_path)] + args) == EXIT_USAGE


def test_train_ablation_flags(data, tmp_path):
    args = TINY[:-4] + ["--epochs", "1", "--lr", "1e-3"]
    flags = ["--prior-mask", "off", "--use-t2", "on", "--harmonize", "scanner", "--dce", "off", "--crf", "on"]
    assert main(["train", "--manifest", str(data), "--out", str(tmp_path)] + args + flags) == EXIT_OK
    spec = json.loads((tmp_path / "model.json").read_text())
    assert spec["prior_mask"] is False and spec["use_t2"] and not spec["dce"] and spec["crf"]
    census = json.loads((tmp_path / "census.json").read_text())
    assert census["layers"][0]["in_channels"] == 2
    assert (tmp_path / "maps").is_dir()
    pred = tmp_path / "pred"
    exam = data / "exams" / "m000"
    assert main(["predict", "--model", str(tmp_path), "--exam", str(exam), "--out", str(pred)]) == EXIT_OK


def test_train_default_unet_census(data, tmp_path, capsys):
    """Full-size defaults with the schedule cut to one update per epoch."""
    args = ["--batch-size", "1", "--iterations", "1", "--patches-per-epoch", "1", "--epochs", "2"]
    assert main(["train", "--manifest", str(data), "--out", str(tmp_path)] + args) == EXIT_OK
    assert len((tmp_path / "log.csv").read_text().strip().splitlines()) == 3
    n = json.loads((tmp_path / "census.json").read_text())["trainable_parameters"]
    assert 2.5e6 <= n <= 3.5e6
    assert f"unet3d: {n} trainable parameters" in capsys.readouterr().out


def test_train_deepmedic_census(tmp_path):
    d = tmp_path / "d"
    assert main(["phantom-gen", "--malignant", "2", "--benign", "1", "--val-fraction", "0.5", "--dims", "12,40,40",
                 "--out", str(d)]) == EXIT_OK
    out = tmp_path / "dm"
    args = ["--arch", "deepmedic", "--batch-size", "1", "--iterations", "1", "--patches-per-epoch", "1",
            "--epochs", "1"]
    assert main(["train", "--manifest", str(d), "--out", str(out)] + args) == EXIT_OK
    n = json.loads((out / "census.json").read_text())["trainable_parameters"]
    assert 0.8e6 <= n <= 1.2e6
    assert np.load(out / "tpm.npy").shape == (12, 40, 40)


# --- predict ------------------------------------------------------------------


def test_predict_outputs_deterministic(model, data, tmp_path):
    exam = data / "exams" / "m001"
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["predict", "--model", str(model), "--exam", str(exam), "--out", str(out),
                     "--slice", "5"]) == EXIT_OK
    assert tree(a) == tree(b)
    prob = read_volume(a / "probability")
    mask = read_mask(a / "mask")
    assert mask.slice_index == 5
    assert not np.delete(mask.data, 5, axis=0).any()
    assert 0 <= prob.data.min() and prob.data.max() <= 1


def test_predict_threshold_one_keeps_max(model, data, tmp_path):
    exam = data / "exams" / "m002"
    assert main(["predict", "--model", str(model), "--exam", str(exam), "--out", str(tmp_path),
                 "--rel-threshold", "1.0"]) == EXIT_OK
    mask = read_mask(tmp_path / "mask")
    plane = read_volume(tmp_path / "probability").data[mask.slice_index]
    assert mask.slice2d().any()
    assert np.all(plane[mask.slice2d()] >= plane.max() * (1 - 1e-6))


def test_predict_missing_model(data, tmp_path):
    rc = main(["predict", "--model", str(tmp_path / "none"), "--exam", str(data / "exams" / "m000"),
               "--out", str(tmp_path)])
    assert rc == EXIT_DATA


def test_predict_bad_slice(model, data, tmp_path):
    rc = main(["predict", "--model", str(model), "--exam", str(data / "exams" / "m000"), "--out", str(tmp_path),
               "--slice", "99"])
    assert rc == EXIT_USAGE


# --- tune / evaluate ----------------------------------------------------------


def test_tune_threshold(model, data, tmp_path):
    assert main(["tune-threshold", "--manifest", str(data), "--model", str(model), "--out", str(tmp_path)]) == EXIT_OK
    t = json.loads((tmp_path / "threshold.json").read_text())
    assert t["best"] in t["grid"] and t["n_exams"] == 3


def test_evaluate_summary(model, data, tmp_path):
    assert main(["evaluate", "--manifest", str(data), "--model", str(model), "--out", str(tmp_path)]) == EXIT_OK
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["n_exams"] == 18 and s["n_rows"] == 72
    for key in ("median_dice_model", "median_dice_rater"):
        assert 0 <= s[key] <= 1
    assert {"statistic", "p_value"} <= set(s["wilcoxon"])
    assert {"p_lower", "p_upper", "W_lower", "W_upper", "equivalent"} <= set(s["tost"])
    assert (tmp_path / "report.csv").is_file() and (tmp_path / "roc.svg").is_file()


def test_evaluate_with_tuning(model, data, tmp_path):
    assert main(["evaluate", "--manifest", str(data), "--model", str(model), "--out", str(tmp_path),
                 "--tune-threshold", "on", "--tune-size", "16"]) == EXIT_OK
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["tuning"]["tuning_size"] == 16 and s["n_exams"] == 2
    assert s["threshold"] == s["tuning"]["best"]
    assert (tmp_path / "threshold_sweep.svg").is_file()
    assert main(["evaluate", "--manifest", str(data), "--model", str(model), "--out", str(tmp_path),
                 "--tune-threshold", "on", "--tune-size", "18"]) == EXIT_USAGE


def test_evaluate_without_raters(model, tmp_path):
    d = tmp_path / "d"
    assert main(["phantom-gen", "--malignant", "2", "--benign", "1", "--test-fraction", "0.5", "--raters", "0",
                 "--out", str(d)]) == EXIT_OK
    assert main(["evaluate", "--manifest", str(d), "--model", str(model), "--out", str(tmp_path / "e")]) == EXIT_USAGE


# --- grad-check ---------------------------------------------------------------


def test_grad_check_passes(tmp_path):
    assert main(["grad-check", "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "grad_check.json").read_text())
    assert rep["passed"] and rep["errors"]["unet3d_end_to_end"] < 1e-3
