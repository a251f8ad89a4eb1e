from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from supnerf.checkpoint import save_checkpoint
from supnerf.geometry import PoseO2C
from supnerf.inference import infer, infer_record, load_model, observation, run_ngpr
from supnerf.nets import SupNerfModel
from supnerf.synthdata import PackReader


@pytest.fixture
def model(tiny_cfg) -> SupNerfModel:
    return SupNerfModel(tiny_cfg.net, tiny_cfg.refiner)


@pytest.fixture
def checkpoint(tmp_path, model, tiny_cfg):
    path = tmp_path / "model.supn"
    save_checkpoint(path, model, tiny_cfg.echo())
    return path


@pytest.fixture
def views(pack_dir):
    return PackReader(pack_dir).group_by_object()[0]


def test_curve_covers_every_stage(model, views, tiny_cfg):
    result = infer_record(model, views[0], tiny_cfg)
    assert not result.failed
    icfg = tiny_cfg.infer
    assert len(result.curve) == 1 + icfg.ff_iters + icfg.nerf_iters
    assert [p.stage for p in result.curve] == ["init", "ff", "nerf", "nerf"]
    assert [p.iter for p in result.curve] == [0, 1, 2, 3]
    assert all(p.re is not None and p.te is not None for p in result.curve)


def test_frozen_pose_keeps_pose_metrics_constant(model, views, tiny_cfg, rng):
    record = views[0]
    obs = observation(record, tiny_cfg)
    icfg = tiny_cfg.infer.model_copy(update={"freeze_pose": True})
    run = run_ngpr(
        model.decoder, rng.normal(size=tiny_cfg.net.latent), rng.normal(size=tiny_cfg.net.latent),
        record.dims, record.pose, obs, tiny_cfg.render, icfg, 0.1, iterations=3,
    )
    assert len(run.curve) == 3
    assert len({(p.re, p.te) for p in run.curve}) == 1
    assert run.curve[0].re == pytest.approx(0.0, abs=1e-6)


def test_record_start_adds_iteration_zero(model, views, tiny_cfg, rng):
    record = views[0]
    run = run_ngpr(
        model.decoder, np.zeros(tiny_cfg.net.latent), np.zeros(tiny_cfg.net.latent),
        record.dims, record.pose, observation(record, tiny_cfg), tiny_cfg.render,
        tiny_cfg.infer, 0.1, iterations=2, record_start=True,
    )
    assert [(p.stage, p.iter) for p in run.curve] == [("init", 0), ("nerf", 1), ("nerf", 2)]


def test_ngpr_lowers_the_inference_loss(model, views, tiny_cfg, rng):
    record = views[0]
    icfg = tiny_cfg.infer.model_copy(update={"code_step": 5e-3, "pose_step": 1e-4})
    run = run_ngpr(
        model.decoder, rng.normal(size=tiny_cfg.net.latent), rng.normal(size=tiny_cfg.net.latent),
        record.dims, record.pose, observation(record, tiny_cfg), tiny_cfg.render,
        icfg, 0.1, iterations=8, record_start=True,
    )
    losses = [p.loss for p in run.curve]
    assert losses[-1] < losses[0]


def test_frozen_dims_come_from_the_encoder(model, views, tiny_cfg):
    record = views[0]
    result = infer_record(model, record, tiny_cfg)
    d = model.encoder(record.image, record.mask).dims()
    assert result.dims == (d.h, d.w, d.l)


def test_cross_view_scores_the_other_views(model, views, tiny_cfg):
    cfg = tiny_cfg.model_copy(
        update={"infer": tiny_cfg.infer.model_copy(update={"cross_view": True})}
    )
    result = infer_record(model, views[0], cfg, siblings=views)
    assert result.cross_count == len(views) - 1
    assert infer_record(model, views[0], tiny_cfg, siblings=views).cross_count == 0


def test_dump_renders(tmp_path, model, views, tiny_cfg):
    record = views[1]
    infer_record(model, record, tiny_cfg, dump_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    stem = f"{record.object_id}_{record.view_id}"
    assert names == {f"{stem}.rgb.supt", f"{stem}.occ.supt", f"{stem}.dep.supt"}


def test_failed_record_becomes_an_entry(model, views, tiny_cfg):
    record = views[0]
    shifted = record.pose.t + np.array([1e3, 0.0, 0.0])
    off_screen = record.with_pose(PoseO2C(record.pose.rot, shifted))
    result = infer_record(model, off_screen, tiny_cfg)
    assert result.failed
    assert result.curve == []


def test_infer_writes_results(tmp_path, pack_dir, checkpoint, tiny_cfg):
    result = infer(pack_dir, checkpoint, tiny_cfg, tmp_path / "out")
    assert len(result.records) == 4
    assert result.failed_count == 0
    with (tmp_path / "out" / "curves.csv").open() as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4 * 4
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["echo"]["tool"] == "supnerf"
    assert summary["records"] == 4
    assert "nerf1" in summary["at_iters"]


def test_infer_is_deterministic_across_threads(tmp_path, pack_dir, checkpoint, tiny_cfg):
    infer(pack_dir, checkpoint, tiny_cfg, tmp_path / "one")
    infer(pack_dir, checkpoint, tiny_cfg.model_copy(update={"threads": 2}), tmp_path / "two")
    one = (tmp_path / "one" / "curves.csv").read_bytes()
    assert one == (tmp_path / "two" / "curves.csv").read_bytes()


def test_loaded_model_is_frozen(checkpoint, tiny_cfg):
    model = load_model(checkpoint, tiny_cfg)
    assert not any(p.requires_grad for p in model.parameters())
