from __future__ import annotations

import json

import pytest

from supnerf.errors import ConfigError
from supnerf.settings import FLAT_KEYS, RunConfig, diff_sections, load_run_config


def test_defaults(monkeypatch):
    monkeypatch.delenv("SUPNERF_THREADS", raising=False)
    cfg = load_run_config()
    assert cfg.render.samples_per_ray == 64
    assert cfg.render.stride == 4
    assert cfg.refiner.init_depth == 20.0
    assert cfg.train.weights.w_occ == 0.1
    assert cfg.train.weights.w_pose == 0.01
    assert cfg.infer.ff_iters == 3
    assert cfg.infer.nerf_iters == 50
    assert cfg.infer.pose_frame == "o2c"
    assert cfg.threads >= 1


def test_shared_flat_key_sets_every_section():
    cfg = load_run_config(overrides={"seed": 11})
    assert {cfg.net.seed, cfg.train.seed, cfg.infer.seed, cfg.synth.seed} == {11}
    assert len(FLAT_KEYS["seed"]) == 4


def test_loss_weights_are_flat_keys():
    cfg = load_run_config(overrides={"w_occ": 0.5, "epochs": 2})
    assert cfg.train.weights.w_occ == 0.5
    assert cfg.train.epochs == 2


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        load_run_config(overrides={"bogus": 1})


def test_invalid_value_is_a_config_error():
    with pytest.raises(ConfigError):
        load_run_config(overrides={"patch": 48})


def test_none_override_means_flag_not_given(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text("nerf_iters: 7\n")
    assert load_run_config(path, {"nerf_iters": None}).infer.nerf_iters == 7
    assert load_run_config(path, {"nerf_iters": 9}).infer.nerf_iters == 9


def test_json_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"pose_frame": "c2o", "report_iters": [5, 10]}))
    cfg = load_run_config(path)
    assert cfg.infer.pose_frame == "c2o"
    assert cfg.infer.report_iters == (5, 10)


def test_unreadable_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "absent.yaml")
    bad = tmp_path / "list.yaml"
    bad.write_text("- 1\n- 2\n")
    with pytest.raises(ConfigError):
        load_run_config(bad)


def test_precedence(tmp_path, monkeypatch):
    monkeypatch.setenv("SUPNERF_THREADS", "3")
    assert load_run_config().threads == 3
    path = tmp_path / "cfg.yaml"
    path.write_text("threads: 4\n")
    assert load_run_config(path).threads == 4
    assert load_run_config(path, {"threads": 5}).threads == 5


def test_echo_identifies_the_tool():
    echo = RunConfig(threads=1).echo()
    assert echo["tool"] == "supnerf"
    assert echo["config"]["infer"]["nerf_iters"] == 50
    json.dumps(echo)


def test_diff_sections():
    assert diff_sections({"a": 1, "b": 2}, {"a": 1, "b": 3, "c": 0}, "net") == ["net.b", "net.c"]
