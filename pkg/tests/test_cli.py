"""Command surface: exit codes, artifacts and the eval table."""

from __future__ import annotations

import json

import pytest
from typer.testing import CliRunner

from supnerf.checkpoint import save_checkpoint
from supnerf.cli import app, main
from supnerf.nets import SupNerfModel
from supnerf.settings import load_run_config

TINY_CONFIG = """\
latent: 4
hidden: 8
encoder_widths: [2, 2, 2, 2, 2]
pe_frequencies: 2
density_layers: 2
color_layers: 1
box_hidden: 4
refiner_hidden: 4
direct_hidden: 4
patch: 8
samples_per_ray: 8
ff_iters: 1
nerf_iters: 2
report_iters: [1]
max_records: 2
threads: 1
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def ckpt(tmp_path, config_file):
    cfg = load_run_config(config_file)
    path = tmp_path / "model.supn"
    save_checkpoint(path, SupNerfModel(cfg.net, cfg.refiner), cfg.echo())
    return path


def test_gen_is_reproducible(tmp_path):
    for name in ("a", "b"):
        args = ["gen", "--out", str(tmp_path / name), "--objects", "2", "--views", "1"]
        assert main([*args, "--seed", "3", "--threads", "1"]) == 0
    manifest = (tmp_path / "a" / "manifest.json").read_text()
    assert manifest == (tmp_path / "b" / "manifest.json").read_text()
    assert len(json.loads(manifest)["frames"]) == 2


def test_missing_required_flag_is_a_usage_error(tmp_path, pack_dir):
    out = tmp_path / "results"
    assert main(["infer", "--data", str(pack_dir), "--out", str(out)]) == 1
    assert not out.exists()


@pytest.mark.parametrize("flag", ["--pose-frame", "--pose-module"])
def test_unknown_choice_is_a_usage_error(tmp_path, pack_dir, ckpt, flag):
    out = tmp_path / "results"
    command = "train" if flag == "--pose-module" else "infer"
    args = [command, "--data", str(pack_dir), "--out", str(out), flag, "bogus"]
    if command == "infer":
        args += ["--ckpt", str(ckpt)]
    assert main(args) == 1
    assert not out.exists()


def test_unknown_config_key_is_a_runtime_failure(tmp_path, pack_dir, ckpt):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nerf_itrs: 3\n")
    args = ["infer", "--data", str(pack_dir), "--ckpt", str(ckpt), "--out", str(tmp_path / "r")]
    assert main([*args, "--config", str(bad)]) == 2


def test_corrupt_checkpoint_is_a_runtime_failure(tmp_path, pack_dir, config_file):
    broken = tmp_path / "broken.supn"
    broken.write_bytes(b"SUPN")
    args = ["infer", "--data", str(pack_dir), "--ckpt", str(broken), "--out", str(tmp_path / "r")]
    assert main([*args, "--config", str(config_file)]) == 2


def test_infer_then_eval(tmp_path, pack_dir, ckpt, config_file):
    results = tmp_path / "results"
    args = ["infer", "--data", str(pack_dir), "--ckpt", str(ckpt), "--out", str(results)]
    assert main([*args, "--config", str(config_file), "--cross-view"]) == 0
    assert (results / "curves.csv").exists()

    report = tmp_path / "eval.json"
    run = CliRunner().invoke(
        app, ["eval", "--results", str(results), "--out", str(report), "--cross-view"]
    )
    assert run.exit_code == 0, run.output
    lines = run.stdout.strip().splitlines()
    assert lines[0].split("\t") == ["stage", "iter", "n", "psnr", "de", "re", "te", "loss"]
    assert [line.split("\t")[0] for line in lines[1:5]] == ["init", "ff", "nerf", "nerf"]
    assert lines[5].startswith("cross_view")

    evaluated = json.loads(report.read_text())
    assert evaluated["echo"]["tool"] == "supnerf"
    assert evaluated["final"]["n"] == 4
    assert evaluated["cross_view"]["n"] == 4


def test_eval_without_curves(tmp_path):
    assert main(["eval", "--results", str(tmp_path), "--out", str(tmp_path / "e.json")]) == 2


def test_ablate_frame(tmp_path, pack_dir, ckpt, config_file):
    args = ["ablate", "frame", "--data", str(pack_dir), "--ckpt", str(ckpt)]
    assert main([*args, "--out", str(tmp_path / "abl"), "--config", str(config_file)]) == 0
    checks = json.loads((tmp_path / "abl" / "frame" / "checks.json").read_text())
    assert checks["experiment"] == "frame"
    assert len(checks["checks"]) == 4


def test_gradcheck(tmp_path):
    out = tmp_path / "grad.json"
    assert main(["gradcheck", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["passed"]
    assert "infer_loss" in report["cases"]
