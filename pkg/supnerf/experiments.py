"""NGPR-only ablations started from injected ground-truth pose errors.

    frame      O2C-relative vs C2O pose parameterization at a fixed rotation error
    ambiguity  free scale vs frozen dimensions from a scaled depth
    sweep      basin of attraction over rotation and depth errors

Each experiment writes one result directory per arm plus a checks report.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import islice
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel
from rich.progress import track
from scipy.stats import spearmanr

from supnerf.checks import CheckResult, check_at_most, check_less, fmt, report
from supnerf.geometry import BoxDimensions, PoseO2C, exp_so3, random_unit_vector
from supnerf.inference import (
    RECORD_FAILURES,
    Observation,
    fit_codes,
    observation,
    record_rng,
    run_ngpr,
)
from supnerf.log import log_duration, stderr_console
from supnerf.nets import SupNerfModel
from supnerf.results import (
    ExperimentResult,
    ExperimentSummary,
    RecordResult,
    median_of,
    write_result,
)
from supnerf.settings import InferConfig, RunConfig
from supnerf.synthdata import FrameRecord, PackReader

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PreparedRecord:
    """A record with its codes and dimensions fixed before any arm runs."""

    record: FrameRecord
    obs: Observation
    shape_code: np.ndarray
    texture_code: np.ndarray
    dims: BoxDimensions


def prepare_record(model: SupNerfModel, record: FrameRecord, cfg: RunConfig) -> PreparedRecord:
    """Encoder codes and dims, or codes fitted at the true pose with true dims.

    The fitted variant runs when `code_source` is "fitted".
    """
    obs = observation(record, cfg)
    enc = model.encoder(record.image, record.mask)
    shape, texture = enc.shape_code.numpy(), enc.texture_code.numpy()
    dims = enc.dims()
    if cfg.ablation.code_source == "fitted":
        dims = record.dims
        shape, texture = fit_codes(
            model.decoder, shape, texture, dims, obs, cfg, cfg.ablation.fit_iters
        )
    return PreparedRecord(record, obs, shape, texture, dims)


def perturb_pose(
    gt: PoseO2C, rot_rad: float, depth_ratio: float, rng: np.random.Generator
) -> PoseO2C:
    """Rotate about a random axis by exactly `rot_rad` and scale T along its ray."""
    rot = exp_so3(random_unit_vector(rng) * rot_rad) @ gt.rot
    return PoseO2C(rot, gt.t * depth_ratio)


@dataclass(frozen=True)
class Arm:
    name: str
    rot_rad: float
    depth_ratio: float
    icfg: InferConfig


def run_arm(
    model: SupNerfModel, prepared: Sequence[PreparedRecord], arm: Arm, cfg: RunConfig
) -> ExperimentResult:
    def one(p: PreparedRecord) -> RecordResult:
        rec = p.record
        # same axis for every arm of a record
        rng = record_rng(cfg.infer.seed, rec)
        try:
            start = perturb_pose(p.obs.gt_pose, arm.rot_rad, arm.depth_ratio, rng)
            run = run_ngpr(
                model.decoder, p.shape_code, p.texture_code, p.dims, start, p.obs, cfg.render,
                arm.icfg, cfg.train.weights.w_occ, record_start=True,
            )
        except RECORD_FAILURES as e:
            log.warning("%s: record %d_%d failed: %s", arm.name, rec.object_id, rec.view_id, e)
            return RecordResult(object_id=rec.object_id, view_id=rec.view_id, failure=str(e))
        return RecordResult(
            object_id=rec.object_id,
            view_id=rec.view_id,
            curve=run.curve,
            dims=(p.dims.h, p.dims.w, p.dims.l),
        )

    with log_duration(log, f"arm {arm.name}"), ThreadPoolExecutor(max_workers=cfg.threads) as pool:
        futures = [pool.submit(one, p) for p in prepared]
        records = [
            f.result()
            for f in track(futures, description=arm.name, console=stderr_console, transient=True)
        ]
    return ExperimentResult(name=arm.name, records=records, echo=cfg.echo())


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


class AblationReport(BaseModel):
    experiment: str
    echo: dict[str, Any] = {}
    arms: dict[str, ExperimentSummary] = {}
    checks: list[CheckResult] = []
    passed: bool = False


@dataclass
class AblationOutcome:
    experiment: str
    results: dict[str, ExperimentResult]
    checks: list[CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def load_prepared(model: SupNerfModel, pack_dir: Path, cfg: RunConfig) -> list[PreparedRecord]:
    reader = PackReader(pack_dir)
    prepared: list[PreparedRecord] = []
    for record in islice(reader.records(), cfg.ablation.max_records):
        try:
            prepared.append(prepare_record(model, record, cfg))
        except RECORD_FAILURES as e:
            log.warning("record %d_%d skipped: %s", record.object_id, record.view_id, e)
    log.info("Prepared %d records (%s codes)", len(prepared), cfg.ablation.code_source)
    return prepared


def write_outcome(out_dir: Path, outcome: AblationOutcome, cfg: RunConfig) -> AblationReport:
    base = out_dir / outcome.experiment
    arms = {
        name: write_result(base / name, result, cfg.infer.report_iters)
        for name, result in outcome.results.items()
    }
    rep = AblationReport(
        experiment=outcome.experiment,
        echo=cfg.echo(),
        arms=arms,
        checks=outcome.checks,
        passed=outcome.passed,
    )
    (base / "checks.json").write_text(rep.model_dump_json(indent=2), encoding="utf-8")
    report(outcome.checks)
    return rep


def _run_arms(
    model: SupNerfModel, prepared: Sequence[PreparedRecord], arms: Sequence[Arm], cfg: RunConfig
) -> dict[str, ExperimentResult]:
    return {arm.name: run_arm(model, prepared, arm, cfg) for arm in arms}


def _ngpr_only(cfg: RunConfig, **update: Any) -> InferConfig:
    return cfg.infer.model_copy(update={"ff_iters": 0, **update})


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------


def ablate_frame_choice(
    model: SupNerfModel, prepared: Sequence[PreparedRecord], cfg: RunConfig
) -> AblationOutcome:
    """O2C improves rotation from a moderate error; C2O does not; neither drifts from zero."""
    acfg = cfg.ablation
    arms = [
        Arm(f"{frame}_{tag}", rot, 1.0, _ngpr_only(cfg, pose_frame=frame, freeze_dims=True))
        for frame in ("o2c", "c2o")
        for tag, rot in (("perturbed", acfg.frame_rot_error), ("zero", 0.0))
    ]
    results = _run_arms(model, prepared, arms, cfg)
    name = "frame"
    o2c, c2o = results["o2c_perturbed"], results["c2o_perturbed"]
    c2o_init, c2o_final = c2o.median_initial("re"), c2o.median_final("re")
    checks = [
        check_less(name, "o2c_improves_re", o2c.median_final("re"), o2c.median_initial("re"), "°"),
        CheckResult(
            name,
            "c2o_no_improvement",
            c2o_init is not None
            and c2o_final is not None
            and c2o_final >= acfg.no_improve_factor * c2o_init,
            f"{fmt(c2o_final, '°')} >= {acfg.no_improve_factor} × {fmt(c2o_init, '°')}",
        ),
    ]
    for frame in ("o2c", "c2o"):
        checks.append(
            check_at_most(
                name, f"{frame}_zero_drift", results[f"{frame}_zero"].median_final("re"),
                acfg.drift_bound_deg, "°",
            )
        )
    return AblationOutcome(name, results, checks)


def ablate_scale_depth(
    model: SupNerfModel, prepared: Sequence[PreparedRecord], cfg: RunConfig
) -> AblationOutcome:
    """Free scale fits the image as well as frozen dims but leaves translation wrong."""
    acfg = cfg.ablation
    free_cfg = _ngpr_only(cfg, pose_frame="o2c", freeze_dims=False)
    frozen_cfg = _ngpr_only(cfg, pose_frame="o2c", freeze_dims=True)
    arms = [
        Arm("free_scale", 0.0, acfg.depth_ratio, free_cfg),
        Arm("frozen_dims", 0.0, acfg.depth_ratio, frozen_cfg),
    ]
    results = _run_arms(model, prepared, arms, cfg)
    name = "ambiguity"
    free, frozen = results["free_scale"], results["frozen_dims"]
    loss_free, loss_frozen = free.median_final("loss"), frozen.median_final("loss")
    te_free, te_frozen = free.median_final("te"), frozen.median_final("te")

    gap = 1 + acfg.te_gap_rel
    rel = None
    if loss_free is not None and loss_frozen is not None and loss_frozen > 0:
        rel = abs(loss_free - loss_frozen) / loss_frozen
    checks = [
        check_at_most(name, "similar_final_loss", rel, acfg.loss_match_rel),
        CheckResult(
            name,
            "free_scale_te_gap",
            te_free is not None and te_frozen is not None and te_free >= gap * te_frozen,
            f"{fmt(te_free, ' m')} >= {gap:.2f} × {fmt(te_frozen, ' m')}",
        ),
        check_less(name, "frozen_reduces_te", te_frozen, frozen.median_initial("te"), " m"),
    ]
    for arm, result in results.items():
        checks.append(
            check_less(
                name,
                f"{arm}_loss_decreases",
                result.median_final("loss"),
                result.median_initial("loss"),
            )
        )
    return AblationOutcome(name, results, checks)


def sweep_arm_name(rot_deg: float, depth_ratio: float) -> str:
    return f"rot{rot_deg:g}_depth{depth_ratio:g}"


def _start_final_pairs(result: ExperimentResult) -> tuple[list[float], list[float]]:
    starts, finals = [], []
    for r in result.succeeded:
        if r.initial and r.final and r.initial.re is not None and r.final.re is not None:
            starts.append(r.initial.re)
            finals.append(r.final.re)
    return starts, finals


def ablate_init_error(
    model: SupNerfModel, prepared: Sequence[PreparedRecord], cfg: RunConfig
) -> AblationOutcome:
    """Final error grows with the starting error; large starts stay outside the basin."""
    acfg = cfg.ablation
    icfg = _ngpr_only(cfg, pose_frame="o2c", freeze_dims=True)
    arms = [
        Arm(sweep_arm_name(deg, ratio), math.radians(deg), ratio, icfg)
        for ratio in acfg.sweep_depth_ratios
        for deg in acfg.sweep_rot_deg
    ]
    results = _run_arms(model, prepared, arms, cfg)
    name = "sweep"
    ratio = acfg.sweep_depth_ratios[0]
    degs = sorted(acfg.sweep_rot_deg)
    by_deg = {deg: results[sweep_arm_name(deg, ratio)] for deg in degs}
    checks: list[CheckResult] = []

    hi = degs[-1]
    ref = min(degs, key=lambda d: abs(d - math.degrees(acfg.frame_rot_error)))
    if hi != ref:
        checks.append(
            check_less(
                name, f"limited_basin_{ref:g}_vs_{hi:g}",
                by_deg[ref].median_final("re"), by_deg[hi].median_final("re"), "°",
            )
        )
        hi_final = by_deg[hi].median_final("re")
        checks.append(
            CheckResult(
                name,
                f"fails_from_{hi:g}",
                hi_final is not None and hi_final >= acfg.fail_bound_deg,
                f"{fmt(hi_final, '°')} >= {fmt(acfg.fail_bound_deg, '°')}",
            )
        )
    if 0.0 in by_deg:
        checks.append(
            check_at_most(
                name, "zero_start_drift", by_deg[0.0].median_final("re"), acfg.drift_bound_deg, "°"
            )
        )

    starts: list[float] = []
    finals: list[float] = []
    for deg in degs:
        s, f = _start_final_pairs(by_deg[deg])
        starts += s
        finals += f
    rho = None
    if len(set(starts)) > 1 and len(set(finals)) > 1:
        rho = float(spearmanr(starts, finals).statistic)
    checks.append(
        CheckResult(
            name, "monotone_degradation", rho is not None and rho > 0, f"spearman {fmt(rho)} > 0"
        )
    )
    for deg in degs:
        final_re = median_of(_start_final_pairs(by_deg[deg])[1])
        log.info("sweep %s: median final RE %s", sweep_arm_name(deg, ratio), fmt(final_re, "°"))
    return AblationOutcome(name, results, checks)


Ablation = Callable[[SupNerfModel, Sequence[PreparedRecord], RunConfig], AblationOutcome]

EXPERIMENTS: dict[str, Ablation] = {
    "frame": ablate_frame_choice,
    "ambiguity": ablate_scale_depth,
    "sweep": ablate_init_error,
}


def run_experiment(
    which: str, model: SupNerfModel, pack_dir: Path, cfg: RunConfig, out_dir: Path
) -> AblationReport:
    prepared = load_prepared(model, pack_dir, cfg)
    with log_duration(log, f"ablate {which}"):
        outcome = EXPERIMENTS[which](model, prepared, cfg)
    return write_outcome(out_dir, outcome, cfg)
