"""Joint training of the encoder, NeRF decoder and pose module.

Only network weights are optimized. Each record contributes
    L_rgb + w_occ L_occ + w_pose (L_direct + Σ_t L_t) + w_dims L_dims
where the render uses the ground-truth camera pose and true dimensions, and
the refiner runs K steps from a sampled initial pose with the state detached
between steps.
"""

from __future__ import annotations

import csv
import logging
import math
from collections.abc import Generator, Sequence
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel
from rich.progress import track

from supnerf import gradengine as ge
from supnerf.baselines import direct_base_state, direct_raw_update
from supnerf.checkpoint import save_checkpoint
from supnerf.errors import (
    BehindCameraError,
    InvalidArgumentError,
    NonFiniteError,
    RecordError,
    TrainingDivergedError,
)
from supnerf.geometry import Roi, o2c_to_c2o
from supnerf.gradengine import SGD, Tape, Tensor
from supnerf.log import log_duration, stderr_console
from supnerf.nets import SupNerfModel
from supnerf.objectives import (
    PatchTargets,
    TrainLoss,
    downsample_targets,
    loss_dims,
    loss_occ,
    loss_pose_corners,
    loss_rgb,
    total_train_loss,
)
from supnerf.pose import (
    PoseUpdate,
    apply_update,
    corners_after_update,
    guarded_corners,
    predict_update,
    sample_initial_pose,
)
from supnerf.renderer import render_patch
from supnerf.settings import RunConfig, TrainConfig
from supnerf.synthdata import FrameRecord, PackReader

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.supn"


@dataclass(frozen=True, eq=False)
class TrainSample:
    record: FrameRecord
    targets: PatchTargets


@contextmanager
def loss_term(name: str) -> Generator[None, None, None]:
    """Re-raise a NaN/Inf tripwire as a divergence naming the loss term."""
    try:
        yield
    except NonFiniteError as e:
        raise TrainingDivergedError(name, f"op '{e.op}'") from e


def jitter_roi(
    roi: Roi, rng: np.random.Generator, cfg: TrainConfig, width: int, height: int
) -> Roi:
    """Randomly rescale and shift the roi, as a detector's box would be off."""
    lo, hi = cfg.roi_scale_range
    if cfg.roi_jitter_px == 0 and lo == hi == 1.0:
        return roi
    scale = float(rng.uniform(lo, hi))
    dx, dy = rng.uniform(-cfg.roi_jitter_px, cfg.roi_jitter_px, size=2)
    cx = (roi.x0 + roi.x1) / 2.0 + dx
    cy = (roi.y0 + roi.y1) / 2.0 + dy
    hw, hh = scale * roi.width / 2.0, scale * roi.height / 2.0
    jittered = Roi(cx - hw, cy - hh, cx + hw, cy + hh).clipped(width, height)
    return roi if jittered.is_empty else jittered


def pose_component_names(cfg: TrainConfig) -> list[str]:
    iters = cfg.refiner_iters if cfg.pose_module == "refiner" else 1
    return ["pose_direct"] + [f"pose_iter{t + 1}" for t in range(iters)]


def record_loss(
    model: SupNerfModel, sample: TrainSample, cfg: RunConfig, rng: np.random.Generator
) -> TrainLoss:
    """Forward pass of one record on the active tape."""
    record, tcfg = sample.record, cfg.train
    k, dims = record.intrinsics, record.dims
    roi = jitter_roi(record.roi, rng, tcfg, k.width, k.height)
    gt_corners = record.corners()

    with loss_term("encoder"):
        enc = model.encoder(record.image, record.mask)
    with loss_term("pose_direct"):
        size = np.array([roi.width, roi.height])
        direct_px = enc.corners_direct * size + np.array([roi.x0, roi.y0])
        l_direct = loss_pose_corners(direct_px, gt_corners)

    state = sample_initial_pose(roi, k, rng, cfg.refiner)
    pose_terms: list[Tensor] = []
    if tcfg.pose_module == "refiner":
        for t in range(tcfg.refiner_iters):
            with loss_term(f"pose_iter{t + 1}"):
                corners = guarded_corners(dims, state, k)
                raw = predict_update(model.refiner, enc.pose_code, corners, roi)
                pred = corners_after_update(state, raw, dims, k)
                pose_terms.append(loss_pose_corners(pred, gt_corners))
            state = apply_update(state, PoseUpdate.from_raw(raw))
    else:
        with loss_term("pose_iter1"):
            raw = direct_raw_update(model.direct_head, enc.pose_code, roi)
            base = direct_base_state(roi, cfg.refiner.init_depth)
            moved = corners_after_update(base, raw, dims, k)
            pose_terms.append(loss_pose_corners(moved, gt_corners))

    c2o = o2c_to_c2o(record.pose)
    field = model.decoder.field(enc.shape_code, enc.texture_code)
    with loss_term("render"):
        render = render_patch(c2o.rot.m, c2o.t, dims, k, field, cfg.render, rng=rng)
    with loss_term("rgb"):
        l_rgb = loss_rgb(render, sample.targets.image, sample.targets.mask)
    with loss_term("occ"):
        l_occ = loss_occ(render, sample.targets.mask)
    l_dims = None
    if tcfg.weights.w_dims > 0:
        with loss_term("dims"):
            l_dims = loss_dims(enc.dims_raw, dims)

    loss = total_train_loss(
        l_rgb, l_occ, pose_terms, tcfg.weights, l_direct=l_direct, l_dims=l_dims
    )
    for name, value in loss.components.items():
        if not math.isfinite(value):
            raise TrainingDivergedError(name)
    return loss


def _check_gradients(model: SupNerfModel) -> None:
    for p in model.parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDivergedError("gradient", f"parameter '{p.name}'")


# ---------------------------------------------------------------------------
# Logs
# ---------------------------------------------------------------------------


class EpochSummary(BaseModel):
    epoch: int
    records: int
    skipped: int
    empty_rgb: int
    total: float
    components: dict[str, float]


class TrainingLog(BaseModel):
    echo: dict[str, Any] = {}
    checkpoint: str = ""
    epochs: list[EpochSummary] = []


@dataclass
class TrainResult:
    checkpoint: Path
    log: TrainingLog


class _BatchWriter:
    """Streams one CSV row per batch."""

    def __init__(self, path: Path, components: Sequence[str]):
        self.fieldnames = ["epoch", "batch", "records", "total", *components]
        self._file = path.open("w", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._file, fieldnames=self.fieldnames)
        self._writer.writeheader()

    def write(self, row: dict[str, Any]) -> None:
        self._writer.writerow({k: row.get(k, "") for k in self.fieldnames})

    def close(self) -> None:
        self._file.close()


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


def load_samples(pack_dir: Path, cfg: RunConfig) -> list[TrainSample]:
    reader = PackReader(pack_dir)
    samples = [
        TrainSample(r, downsample_targets(r.image, r.mask, r.depth, cfg.render.stride))
        for r in reader.records()
    ]
    if reader.errors:
        log.warning("%d of %d records failed to load", len(reader.errors), len(reader))
    return samples


def run_epoch(
    model: SupNerfModel,
    optimizer: SGD,
    samples: Sequence[TrainSample],
    cfg: RunConfig,
    epoch: int,
    writer: _BatchWriter | None = None,
) -> EpochSummary:
    tcfg = cfg.train
    epoch_rng = np.random.default_rng(np.random.SeedSequence([tcfg.seed, epoch]))
    order = epoch_rng.permutation(len(samples))
    batches = [order[i : i + tcfg.batch_size] for i in range(0, len(order), tcfg.batch_size)]
    totals: list[float] = []
    components: dict[str, list[float]] = {}
    skipped = empty_rgb = 0

    for b, batch in enumerate(
        track(batches, description=f"Epoch {epoch}", console=stderr_console, transient=True)
    ):
        optimizer.zero_grad()
        batch_losses: list[TrainLoss] = []
        for idx in batch:
            sample = samples[int(idx)]
            rec = sample.record
            rng = np.random.default_rng(
                np.random.SeedSequence([tcfg.seed, epoch, rec.object_id, rec.view_id])
            )
            try:
                with Tape() as tape:
                    loss = record_loss(model, sample, cfg, rng)
                    scaled = loss.total * (1.0 / len(batch))
                ge.backward(scaled, tape)
            except (InvalidArgumentError, BehindCameraError) as e:
                log.warning("Skipping %s", RecordError(rec.object_id, rec.view_id, str(e)))
                skipped += 1
                continue
            batch_losses.append(loss)
        if not batch_losses:
            continue
        _check_gradients(model)
        optimizer.step()

        batch_total = float(np.mean([lo.total.item() for lo in batch_losses]))
        batch_parts = {
            name: float(np.mean([lo.components[name] for lo in batch_losses]))
            for name in batch_losses[0].components
        }
        empty_rgb += sum(lo.empty_rgb for lo in batch_losses)
        totals.extend(lo.total.item() for lo in batch_losses)
        for lo in batch_losses:
            for name, value in lo.components.items():
                components.setdefault(name, []).append(value)
        if writer is not None:
            row = {"epoch": epoch, "batch": b, "records": len(batch_losses), "total": batch_total}
            writer.write({**row, **batch_parts})

    return EpochSummary(
        epoch=epoch,
        records=len(totals),
        skipped=skipped,
        empty_rgb=empty_rgb,
        total=float(np.mean(totals)) if totals else math.nan,
        components={name: float(np.mean(v)) for name, v in components.items()},
    )


def train(
    pack_dir: Path,
    cfg: RunConfig,
    out_dir: Path,
    model: SupNerfModel | None = None,
) -> TrainResult:
    """Train for cfg.train.epochs; checkpoint and loss log are rewritten every epoch."""
    tcfg = cfg.train
    samples = load_samples(pack_dir, cfg)
    if not samples:
        raise InvalidArgumentError(f"no loadable records in {pack_dir}")
    model = model or SupNerfModel(cfg.net, cfg.refiner)
    optimizer = SGD(model.parameters(), lr=tcfg.lr, momentum=tcfg.momentum)

    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / CHECKPOINT_NAME
    training_log = TrainingLog(echo=cfg.echo(), checkpoint=ckpt.name)
    components = ["rgb", "occ", *pose_component_names(tcfg)]
    if tcfg.weights.w_dims > 0:
        components.append("dims")
    writer = _BatchWriter(out_dir / "loss_log.csv", components)
    try:
        for epoch in range(1, tcfg.epochs + 1):
            with log_duration(log, f"train epoch {epoch}"):
                summary = run_epoch(model, optimizer, samples, cfg, epoch, writer)
            training_log.epochs.append(summary)
            log.info("Epoch %d: loss %.5f over %d records", epoch, summary.total, summary.records)
            save_checkpoint(ckpt, model, cfg.echo())
            log_json = training_log.model_dump_json(indent=2)
            (out_dir / "loss_log.json").write_text(log_json, encoding="utf-8")
    finally:
        writer.close()
    return TrainResult(checkpoint=ckpt, log=training_log)
