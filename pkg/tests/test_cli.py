"""End-to-end subcommand checks on small synthetic configs."""

import json
import subprocess
import sys

import pytest

BASE = """
dataset = synthetic
synthetic_samples = 240
synthetic_test_samples = 60
synthetic_classes = 4
synthetic_shape = 1x14x14
num_devices = 4
classes_per_device = 2
samples_per_class = 30
devices_per_round = 2
local_epochs = 1
batch_size = 16
learning_rate = 0.05
total_rounds = 2
eval_every = 1
model = cnn
norm = layer
seed = 3
"""


def _run(*args):
    return subprocess.run([sys.executable, "-m", "fednorm.cli", *args],
                          capture_output=True, text=True)


def _cfg(tmp_path, extra=""):
    path = tmp_path / "run.cfg"
    path.write_text(BASE + f"out_dir = {tmp_path / 'out'}\n" + extra)
    return path


def test_run_writes_artifacts(tmp_path):
    res = _run("run", str(_cfg(tmp_path)))
    assert res.returncode == 0, res.stderr
    out = tmp_path / "out"
    assert (out / "config.resolved").exists()
    assert (out / "global.ckpt").exists()
    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert set(rec) == {"round", "devices", "acc", "loss", "norms", "secs"}


def test_run_deterministic_across_invocations(tmp_path):
    res1 = _run("run", str(_cfg(tmp_path)))
    metrics1 = (tmp_path / "out" / "metrics.jsonl").read_bytes()
    res2 = _run("run", str(_cfg(tmp_path)))
    metrics2 = (tmp_path / "out" / "metrics.jsonl").read_bytes()
    assert res1.returncode == res2.returncode == 0

    def strip_secs(blob):
        return [{k: v for k, v in json.loads(l).items() if k != "secs"}
                for l in blob.splitlines()]

    assert strip_secs(metrics1) == strip_secs(metrics2)


def test_run_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(BASE + "learning_rte = 0.1\n")
    res = _run("run", str(path))
    assert res.returncode != 0
    assert "learning_rte" in res.stderr


def test_partition_writes_manifest(tmp_path):
    res = _run("partition", str(_cfg(tmp_path)))
    assert res.returncode == 0, res.stderr
    text = (tmp_path / "out" / "partition.tsv").read_text()
    lines = text.splitlines()
    assert lines[0].startswith("#")
    body = [l for l in lines if not l.startswith("#")]
    assert len(body) == 4
    dev, idx = body[0].split("\t")
    assert dev == "0"
    assert len(idx.split(",")) == 60


def test_toy_shift_writes_reports(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(
        f"delta = 0.5\nsteps = 5\nseed = 0\nout_dir = {tmp_path / 'out'}\n")
    res = _run("toy-shift", str(path))
    assert res.returncode == 0, res.stderr
    out = tmp_path / "out"
    assert (out / "shift_stats.csv").exists()
    assert (out / "histograms.csv").exists()
    assert (out / "divergence.json").exists()
    header = (out / "histograms.csv").read_text().splitlines()[0]
    assert header == "device,layer,channel,stage,bin_lo,bin_hi,count"


def test_check_props_passes_small_budget():
    res = _run("check-props", "--seed", "0", "--trials", "10")
    assert res.returncode == 0, res.stdout + res.stderr
    assert "PASS" in res.stdout
    assert "FAIL" not in res.stdout


def test_missing_config_file_fails_cleanly():
    res = _run("run", "/nonexistent/nowhere.cfg")
    assert res.returncode != 0
    assert res.stderr.strip()
