"""Two-stage inference: feed-forward refinement, then NeRF gradient-based pose
refinement (NGPR) over the shape code, texture code and pose.

Network weights stay frozen throughout. Dimensions come from the encoder and
are never updated unless free-scale is requested (freeze_dims=False), which
adds a single log-scale on the normalization diagonal.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from rich.progress import track

from supnerf import gradengine as ge
from supnerf.checkpoint import load_checkpoint
from supnerf.errors import BehindCameraError, InvalidArgumentError, NonFiniteError, ShapeError
from supnerf.geometry import (
    BoxDimensions,
    CameraIntrinsics,
    PoseO2C,
    rotation_error,
    translation_error,
)
from supnerf.gradengine import Parameter, Tape, Tensor
from supnerf.log import log_duration, stderr_console
from supnerf.nets import Field, NerfDecoder, SupNerfModel
from supnerf.objectives import (
    PatchTargets,
    Stage,
    ViewTarget,
    cross_view_eval,
    depth_error,
    downsample_targets,
    psnr,
    total_infer_loss,
)
from supnerf.pose import refine, sample_initial_pose
from supnerf.renderer import RenderOutput, make_pose_parameterization, render_patch, render_pose
from supnerf.results import CurvePoint, ExperimentResult, RecordResult, write_result
from supnerf.settings import InferConfig, RenderConfig, RunConfig
from supnerf.synthdata import FrameRecord, PackReader
from supnerf.tensorio import write_tensor

log = logging.getLogger(__name__)

# Failures that abort one record but not the run
RECORD_FAILURES = (BehindCameraError, InvalidArgumentError, NonFiniteError, ShapeError)


def load_model(ckpt: Path, cfg: RunConfig) -> SupNerfModel:
    """Build the model from the run config and restore weights; net sections must match."""
    model = SupNerfModel(cfg.net, cfg.refiner)
    load_checkpoint(ckpt, model, cfg.net, cfg.refiner)
    model.freeze()
    return model


def record_rng(seed: int, record: FrameRecord) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, record.object_id, record.view_id]))


# ---------------------------------------------------------------------------
# Metrics at one pose
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Observation:
    """What the optimizer compares renders against."""

    k: CameraIntrinsics
    targets: PatchTargets
    gt_pose: PoseO2C


def curve_point(
    stage: Stage, it: int, out: RenderOutput, loss: float, pose: PoseO2C, obs: Observation
) -> CurvePoint:
    t = obs.targets
    return CurvePoint(
        stage=stage,
        iter=it,
        psnr=psnr(out.rgb.data, t.image, t.mask),
        de=depth_error(out.depth.data, t.depth, out.hit),
        re=rotation_error(pose.rot, obs.gt_pose.rot),
        te=translation_error(pose.t, obs.gt_pose.t),
        loss=loss,
    )


def evaluate_pose(
    field: Field, dims: BoxDimensions, pose: PoseO2C, obs: Observation,
    cfg: RunConfig, stage: Stage, it: int,
) -> CurvePoint:
    out = render_pose(pose, dims, obs.k, field, cfg.render)
    loss = total_infer_loss(out, obs.targets, cfg.train.weights.w_occ).item()
    return curve_point(stage, it, out, loss, pose, obs)


# ---------------------------------------------------------------------------
# NGPR
# ---------------------------------------------------------------------------


@dataclass
class NgprRun:
    curve: list[CurvePoint]
    pose: PoseO2C
    shape_code: np.ndarray
    texture_code: np.ndarray
    log_scale: float
    render: RenderOutput


def run_ngpr(
    decoder: NerfDecoder,
    shape_code: np.ndarray,
    texture_code: np.ndarray,
    dims: BoxDimensions,
    pose0: PoseO2C,
    obs: Observation,
    render_cfg: RenderConfig,
    icfg: InferConfig,
    w_occ: float,
    iterations: int | None = None,
    start_iter: int = 0,
    record_start: bool = False,
) -> NgprRun:
    """Plain gradient descent on L_rgb + w_occ L_occ.

    Codes step by icfg.code_step, pose (and the free-scale log-scale) by
    icfg.pose_step. One curve point is recorded after every step; with
    `record_start` the starting pose is recorded first as iteration 0.
    """
    iterations = icfg.nerf_iters if iterations is None else iterations
    shape = Parameter(np.array(shape_code), name="code.shape")
    texture = Parameter(np.array(texture_code), name="code.texture")
    pose = make_pose_parameterization(icfg.pose_frame, pose0, obs.k)
    log_scale = None if icfg.freeze_dims else Parameter(np.zeros(1), name="scale.log")
    field = decoder.field(shape, texture)
    leaves = [shape, texture, *pose.parameters()] + ([log_scale] if log_scale is not None else [])

    curve: list[CurvePoint] = []
    for j in range(iterations + 1):
        with Tape() as tape:
            rot_c2o, t_c2o = pose.camera()
            out = render_patch(rot_c2o, t_c2o, dims, obs.k, field, render_cfg, log_scale=log_scale)
            loss = total_infer_loss(out, obs.targets, w_occ)
        if j > 0 or record_start:
            stage: Stage = "nerf" if j > 0 else "init"
            curve.append(curve_point(stage, start_iter + j, out, loss.item(), pose.pose_o2c(), obs))
        if j == iterations:
            break

        ge.zero_grad(leaves)
        ge.backward(loss, tape)
        for code in (shape, texture):
            code.data = code.data - icfg.code_step * code.grad
        if not icfg.freeze_pose:
            for p in pose.parameters():
                p.data = p.data - icfg.pose_step * p.grad
            pose.commit()
        if log_scale is not None:
            log_scale.data = log_scale.data - icfg.pose_step * log_scale.grad

    return NgprRun(
        curve=curve,
        pose=pose.pose_o2c(),
        shape_code=shape.data.copy(),
        texture_code=texture.data.copy(),
        log_scale=0.0 if log_scale is None else float(log_scale.data[0]),
        render=out,
    )


def fit_codes(
    decoder: NerfDecoder,
    shape_code: np.ndarray,
    texture_code: np.ndarray,
    dims: BoxDimensions,
    obs: Observation,
    cfg: RunConfig,
    iterations: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Fit shape/texture codes at the true pose with the pose frozen."""
    icfg = cfg.infer.model_copy(update={"freeze_pose": True, "freeze_dims": True})
    run = run_ngpr(
        decoder, shape_code, texture_code, dims, obs.gt_pose, obs, cfg.render, icfg,
        cfg.train.weights.w_occ, iterations=iterations,
    )
    return run.shape_code, run.texture_code


# ---------------------------------------------------------------------------
# Per record
# ---------------------------------------------------------------------------


def observation(record: FrameRecord, cfg: RunConfig) -> Observation:
    targets = downsample_targets(record.image, record.mask, record.depth, cfg.render.stride)
    return Observation(record.intrinsics, targets, record.pose)


def view_targets(records: Sequence[FrameRecord], cfg: RunConfig) -> list[ViewTarget]:
    return [
        ViewTarget(r.view_id, r.pose, r.intrinsics, observation(r, cfg).targets) for r in records
    ]


def infer_record(
    model: SupNerfModel,
    record: FrameRecord,
    cfg: RunConfig,
    siblings: Sequence[FrameRecord] = (),
    dump_dir: Path | None = None,
) -> RecordResult:
    """Feed-forward then NGPR on one record; failures become a structured entry."""
    icfg = cfg.infer
    rng = record_rng(icfg.seed, record)
    try:
        obs = observation(record, cfg)
        enc = model.encoder(record.image, record.mask)
        dims = enc.dims()
        shape0, texture0 = enc.shape_code.numpy(), enc.texture_code.numpy()
        field = model.decoder.field(Tensor(shape0), Tensor(texture0))
        k = record.intrinsics

        state = sample_initial_pose(record.roi, k, rng, cfg.refiner)
        curve = [evaluate_pose(field, dims, state.to_o2c(k), obs, cfg, "init", 0)]
        if icfg.ff_iters > 0:
            traj = refine(model.refiner, state, enc.pose_code, dims, k, record.roi, icfg.ff_iters)
            for i, s in enumerate(traj.states[1:], start=1):
                curve.append(evaluate_pose(field, dims, s.to_o2c(k), obs, cfg, "ff", i))
            state = traj.final

        run = run_ngpr(
            model.decoder, shape0, texture0, dims, state.to_o2c(k), obs, cfg.render, icfg,
            cfg.train.weights.w_occ, start_iter=icfg.ff_iters,
        )
        curve.extend(run.curve)
    except RECORD_FAILURES as e:
        log.warning("record %d_%d failed: %s", record.object_id, record.view_id, e)
        return RecordResult(object_id=record.object_id, view_id=record.view_id, failure=str(e))

    used = dims if icfg.freeze_dims else dims.scaled(float(np.exp(run.log_scale)))
    result = RecordResult(
        object_id=record.object_id,
        view_id=record.view_id,
        curve=curve,
        dims=(used.h, used.w, used.l),
    )
    others = [s for s in siblings if s.view_id != record.view_id]
    if icfg.cross_view and others:
        fitted = model.decoder.field(Tensor(run.shape_code), Tensor(run.texture_code))
        score = cross_view_eval(fitted, used, view_targets(others, cfg), cfg.render, record.view_id)
        result.psnr_cross, result.de_cross = score.psnr_cross, score.de_cross
        result.cross_count = score.count
    if dump_dir is not None:
        stem = dump_dir / f"{record.object_id}_{record.view_id}"
        write_tensor(stem.with_suffix(".rgb.supt"), run.render.rgb.data)
        write_tensor(stem.with_suffix(".occ.supt"), run.render.occupancy.data)
        write_tensor(stem.with_suffix(".dep.supt"), run.render.depth.data)
    return result


def infer(pack_dir: Path, ckpt: Path, cfg: RunConfig, out_dir: Path) -> ExperimentResult:
    """Run inference over every record of a pack and write curves and summary to `out_dir`."""
    model = load_model(ckpt, cfg)
    reader = PackReader(pack_dir)
    groups = reader.group_by_object()
    records = [r for views in groups.values() for r in views]
    dump_dir = out_dir / "renders" if cfg.infer.dump_renders else None

    with log_duration(log, f"infer {len(records)} records"):
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futures = [
                pool.submit(infer_record, model, r, cfg, groups[r.object_id], dump_dir)
                for r in records
            ]
            done = track(futures, description="Inferring", console=stderr_console, transient=True)
            results = [f.result() for f in done]

    results += [
        RecordResult(object_id=e.object_id, view_id=e.view_id, failure=e.reason)
        for e in reader.errors
    ]
    result = ExperimentResult(name="infer", records=results, echo=cfg.echo())
    write_result(out_dir, result, cfg.infer.report_iters)
    return result
