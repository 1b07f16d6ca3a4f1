import json
import subprocess
import sys

import pytest
import yaml

from tforge import cli

SMALL = {
    "dataset": "synthetic", "n_train": 1000, "n_test": 300, "attack": "patch", "target_label": 3,
    "epochs": 4, "steps": 8, "pretrain_steps": 0, "unet_width": 4, "per_class": 3, "labels": [3, 0],
    "nc_steps": 8,
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(SMALL))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_usage_errors_exit_2(tmp_path, capsys):
    assert run() == 2
    assert run("frobnicate", "--out", tmp_path) == 2
    assert run("train") == 2  # --out missing
    assert run("scan", "--out", tmp_path, "--engine", "karm") == 2
    assert run("report", "--out", tmp_path / "r") == 2
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("report", "--out", tmp_path / "r", empty) == 2
    assert "no scan results" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("beta_fraction: 1.5\n")
    assert run("inject", "--config", bad, "--out", tmp_path / "run") == 2
    assert run("inject", "--config", tmp_path / "nope.yaml", "--out", tmp_path / "run") == 2
    assert run("inject", "--set", "attack", "--out", tmp_path / "run") == 2


def test_missing_inputs_name_the_path(tmp_path, config, capsys):
    assert run("scan", "--config", config, "--out", tmp_path / "run") == 2
    assert "params.pt" in capsys.readouterr().err
    assert run("train", "--config", config, "--out", tmp_path / "run") == 2
    assert "inject" in capsys.readouterr().err


def test_cifar_without_data_is_usage_error(tmp_path, monkeypatch):
    monkeypatch.delenv("TF_DATA_ROOT", raising=False)
    assert run("inject", "--set", "dataset=cifar10", "--set", "attack=patch", "--out", tmp_path / "r") == 2


def test_runtime_failure_exit_3(tmp_path):
    root = tmp_path / "cifar"
    root.mkdir()
    assert run("inject", "--set", "dataset=cifar10", "--set", "attack=patch", "--data-root", root,
               "--out", tmp_path / "r") == 3


def test_pipeline_and_force(tmp_path, config):
    out = tmp_path / "run"
    assert run("inject", "--config", config, "--out", out) == 0
    assert (out / "inject" / "trigger.json").is_file() and (out / "inject" / "samples.png").is_file()
    assert run("inject", "--config", config, "--out", out) == 2
    assert run("inject", "--config", config, "--out", out, "--force") == 0
    assert run("train", "--config", config, "--out", out) == 0
    metrics = json.loads((out / "model" / "metrics.json").read_text())
    assert metrics["asr_inj"] is not None
    assert run("scan", "--config", config, "--out", out, "--engine", "unicorn") == 0
    assert run("scan", "--config", config, "--out", out, "--engine", "nc") == 0
    for eng in ("unicorn", "nc"):
        d = out / "scan" / eng
        rep = json.loads((d / "report.json").read_text())
        assert sorted(r["label"] for r in rep["rows"]) == [0, 3]
        man = json.loads((d / "manifest.json").read_text())
        assert man["seed"] == 0 and man["config_digest"] and man["code_version"]
        assert (d / "label_3" / "loss.csv").is_file()
    assert run("report", "--out", tmp_path / "rep", out) == 0
    summary = json.loads((tmp_path / "rep" / "summary.json").read_text())
    assert set(summary) == {"unicorn", "nc"}
    assert summary["unicorn"]["detection"]["tp"] + summary["unicorn"]["detection"]["fn"] == 1
    assert (tmp_path / "rep" / "figure.png").is_file() and (tmp_path / "rep" / "summary.txt").is_file()


def test_seed_override_recorded(tmp_path, config):
    out = tmp_path / "run"
    assert run("inject", "--config", config, "--seed", "9", "--out", out) == 0
    assert json.loads((out / "inject" / "manifest.json").read_text())["seed"] == 9


def test_console_script_entry(tmp_path):
    res = subprocess.run([sys.executable, "-m", "tforge.cli", "report", "--out", str(tmp_path / "x")],
                         capture_output=True, text=True)
    assert res.returncode == 2 and "run directory" in res.stderr
