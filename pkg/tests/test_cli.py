import json
import os
import subprocess
import sys

import numpy as np
import pytest

from dcl import cli, config, fileio

PIPELINE_ARGS = [
    "--set", "dataset=mnist-mini", "--set", "data_n=160",
    "--set", "gan_iters=6", "--set", "gan_batch=16", "--set", "latent_dim=8",
    "--set", "k=3", "--set", "cluster_epochs=2", "--set", "cluster_hidden=8",
    "--set", "cluster_batch=80", "--set", "cluster_lr=1e-3",
    "--set", "cluster_init_std=0.1", "--set", "replicas=2",
]


def run_cli(args):
    return cli.main([str(a) for a in args])


# ---------------------------------------------------------------------------
# config


def test_config_defaults_and_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("seed = 5\nlambda = 0.4  # trailing comment\n\n# full-line comment\n")
    cfg = config.resolve(path, {"lambda": "0.6"})
    assert cfg["seed"] == 5
    assert cfg["lambda"] == 0.6  # override beats file
    assert cfg["tau"] == 20.0  # default preserved


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("warp_speed = 9\n")
    with pytest.raises(config.ConfigError, match="unknown key"):
        config.parse_file(path)
    with pytest.raises(config.ConfigError):
        config.resolve(None, {"warp_speed": "9"})


def test_config_type_coercion():
    cfg = config.resolve(None, {"gan_iters": "42", "lr": "1e-3"})
    assert cfg["gan_iters"] == 42 and isinstance(cfg["gan_iters"], int)
    assert cfg["lr"] == pytest.approx(1e-3)
    with pytest.raises(config.ConfigError):
        config.resolve(None, {"gan_iters": "many"})


def test_config_serialize_covers_all_keys():
    text = config.serialize(dict(config.DEFAULTS))
    lines = [l for l in text.splitlines() if l]
    assert len(lines) == len(config.DEFAULTS)
    assert lines[0].startswith("dataset = ")


def test_head_deltas_rules():
    cfg = dict(config.DEFAULTS)
    dp, do = config.head_deltas(cfg)
    assert dp == pytest.approx(1e-4 * np.log(10))
    assert do == pytest.approx(1e-2 * np.log(50))
    cfg["delta_rule"] = "zero"
    assert config.head_deltas(cfg) == (0.0, 0.0)
    cfg["delta_rule"] = "const:0.3:0.5"
    assert config.head_deltas(cfg) == (0.3, 0.5)
    cfg["delta_rule"] = "magic"
    with pytest.raises(config.ConfigError):
        config.head_deltas(cfg)


# ---------------------------------------------------------------------------
# subcommands


def test_synth_data_gauss(tmp_path):
    out = tmp_path / "g"
    assert run_cli(["synth-data", "--out", out, "--seed", 1,
                    "--set", "dataset=gauss-3", "--set", "synth_n=50",
                    "--set", "k=3"]) == 0
    values, rate, _ = fileio.read_features(out / "features.dcfm")
    labels = fileio.read_labels(out / "labels.dclb")
    assert values.shape == (50, 8) and len(labels) == 50
    assert rate == 0.0
    assert (out / "config.resolved").exists()


def test_evaluate_perfect_prediction(tmp_path):
    out = tmp_path / "e"
    out.mkdir()
    labels = np.array([0, 1, 2, 1, 0])
    fileio.write_labels(out / "truth.dclb", labels)
    fileio.write_labels(out / "pred.dclb", labels)
    code = run_cli(["evaluate", "--out", out,
                    "--set", f"pred_file={out/'pred.dclb'}",
                    "--set", f"labels_file={out/'truth.dclb'}"])
    assert code == 0
    report = json.loads((out / "eval.json").read_text())
    assert report["acc"] == 1.0


def test_cli_error_record_is_machine_parsable(tmp_path, capsys):
    code = run_cli(["evaluate", "--out", tmp_path / "x",
                    "--set", "pred_file=/nonexistent.dclb"])
    assert code == 1
    err = capsys.readouterr().err.strip().splitlines()
    record = json.loads(err[-1])
    assert record["command"] == "evaluate"
    assert record["error"]


def test_cli_rejects_bad_set_syntax(capsys):
    assert run_cli(["evaluate", "--set", "oops"]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["error"] == "ConfigError"


def test_pipeline_roundtrip_and_artifacts(tmp_path):
    out = tmp_path / "run"
    assert run_cli(["pipeline", "--out", out, "--seed", 3] + PIPELINE_ARGS) == 0
    for name in ("gan.dcgk", "gan_losses.jsonl", "features.dcfm",
                 "features_prime.dcfm", "labels.dclb", "metrics.jsonl",
                 "assignments.dclb", "eval.json", "config.resolved"):
        assert (out / name).exists(), name
    lines = (out / "metrics.jsonl").read_text().splitlines()
    head = json.loads(lines[0])
    assert head["config"]["seed"] == 3  # echoed config leads the log
    record = json.loads(lines[1])
    assert {"epoch", "heads", "best_head", "acc"} <= set(record)
    assert len(record["heads"]) == 6


def test_pipeline_byte_identical_rerun(tmp_path):
    out = tmp_path / "run"
    args = ["pipeline", "--out", out, "--seed", 11] + PIPELINE_ARGS
    assert run_cli(args) == 0
    saved = {name: (out / name).read_bytes()
             for name in ("metrics.jsonl", "gan_losses.jsonl", "eval.json")}
    assert run_cli(args) == 0
    for name, blob in saved.items():
        assert (out / name).read_bytes() == blob, name


def test_extract_matches_in_process_pipeline(tmp_path):
    # chained subcommands reproduce what the pipeline produced in one process
    out = tmp_path / "chain"
    base = ["--out", out, "--seed", 3] + PIPELINE_ARGS
    assert run_cli(["train-gan"] + base) == 0
    assert run_cli(["extract"] + base) == 0
    first = (out / "features.dcfm").read_bytes()
    assert run_cli(["extract"] + base) == 0
    assert (out / "features.dcfm").read_bytes() == first


def test_grad_check_subcommand(tmp_path, capsys):
    assert run_cli(["grad-check", "--seed", "1", "--out", tmp_path / "gc"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out


def test_config_file_flag_and_echo(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text("dataset = gauss-3\nsynth_n = 30\nk = 3\nseed = 9\n")
    out = tmp_path / "o"
    assert run_cli(["synth-data", "--config", cfg_path, "--out", out,
                    "--set", "synth_n=40"]) == 0
    echoed = (out / "config.resolved").read_text()
    assert "synth_n = 40" in echoed  # --set beats the file
    assert "seed = 9" in echoed      # file beats the default
    values, _, _ = fileio.read_features(out / "features.dcfm")
    assert values.shape[0] == 40


def test_console_entrypoint():
    proc = subprocess.run([sys.executable, "-m", "dcl.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert "pipeline" in proc.stdout
