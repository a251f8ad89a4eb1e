"""Experiment results: per-iteration curves, per-record outcomes, summaries.

A run directory holds
    curves.csv     one row per record per iteration
    records.csv    one row per record (final metrics, cross-view scores, failure)
    summary.json   medians plus the config echo
"""

from __future__ import annotations

import csv
import logging
import math
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel

from supnerf.objectives import Stage

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("object_id", "view_id", "stage", "iter", "psnr", "de", "re", "te", "loss")
RECORD_COLUMNS = (
    "object_id", "view_id", "failure", "iterations",
    "psnr", "de", "re", "te", "loss", "psnr_cross", "de_cross", "cross_count",
)
METRICS = ("psnr", "de", "re", "te", "loss")


class CurvePoint(BaseModel):
    stage: Stage
    iter: int
    psnr: float | None = None
    de: float | None = None
    re: float | None = None
    te: float | None = None
    loss: float | None = None


class RecordResult(BaseModel):
    object_id: int
    view_id: int
    curve: list[CurvePoint] = []
    failure: str | None = None
    dims: tuple[float, float, float] | None = None  # (h, w, l) used for rendering
    psnr_cross: float | None = None
    de_cross: float | None = None
    cross_count: int = 0

    @property
    def failed(self) -> bool:
        return self.failure is not None

    @property
    def initial(self) -> CurvePoint | None:
        return self.curve[0] if self.curve else None

    @property
    def final(self) -> CurvePoint | None:
        return self.curve[-1] if self.curve else None

    def at_iter(self, it: int) -> CurvePoint | None:
        for point in self.curve:
            if point.iter == it:
                return point
        return None


def median_of(values: list[float | None]) -> float | None:
    """Median over defined values; None when nothing is defined."""
    defined = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.median(defined)) if defined else None


def _medians(points: list[CurvePoint | None]) -> dict[str, float | None]:
    present = [p for p in points if p is not None]
    return {m: median_of([getattr(p, m) for p in present]) for m in METRICS}


class ExperimentSummary(BaseModel):
    name: str
    echo: dict[str, Any] = {}
    records: int
    failed: int
    initial: dict[str, float | None]
    final: dict[str, float | None]
    at_iters: dict[str, dict[str, float | None]] = {}
    psnr_cross: float | None = None
    de_cross: float | None = None


class ExperimentResult(BaseModel):
    name: str
    records: list[RecordResult] = []
    echo: dict[str, Any] = {}

    @property
    def succeeded(self) -> list[RecordResult]:
        return [r for r in self.records if not r.failed]

    @property
    def failed_count(self) -> int:
        return sum(r.failed for r in self.records)

    def median_initial(self, metric: str) -> float | None:
        return median_of([getattr(r.initial, metric) for r in self.succeeded if r.initial])

    def median_final(self, metric: str) -> float | None:
        return median_of([getattr(r.final, metric) for r in self.succeeded if r.final])

    def summary(self, report_iters: tuple[int, ...] = ()) -> ExperimentSummary:
        ok = self.succeeded
        at_iters: dict[str, dict[str, float | None]] = {}
        for it in report_iters:
            points = [_nerf_point(r, it) for r in ok]
            if any(p is not None for p in points):
                at_iters[f"nerf{it}"] = _medians(points)
        cross = [r for r in ok if r.cross_count > 0]
        return ExperimentSummary(
            name=self.name,
            echo=self.echo,
            records=len(self.records),
            failed=self.failed_count,
            initial=_medians([r.initial for r in ok]),
            final=_medians([r.final for r in ok]),
            at_iters=at_iters,
            psnr_cross=median_of([r.psnr_cross for r in cross]) if cross else None,
            de_cross=median_of([r.de_cross for r in cross]) if cross else None,
        )


def _nerf_point(record: RecordResult, nerf_iter: int) -> CurvePoint | None:
    """Curve point after `nerf_iter` gradient iterations."""
    nerf = [p for p in record.curve if p.stage == "nerf"]
    return nerf[nerf_iter - 1] if 0 < nerf_iter <= len(nerf) else None


# ---------------------------------------------------------------------------
# Writers
# ---------------------------------------------------------------------------


def _cell(value: Any) -> Any:
    return "" if value is None else value


def write_curves_csv(path: Path, result: ExperimentResult) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = 0
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for record in result.succeeded:
            for point in record.curve:
                row = {"object_id": record.object_id, "view_id": record.view_id}
                row.update({k: _cell(v) for k, v in point.model_dump().items()})
                writer.writerow(row)
                rows += 1
    return rows


def write_records_csv(path: Path, result: ExperimentResult) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RECORD_COLUMNS)
        writer.writeheader()
        for r in result.records:
            final = r.final.model_dump() if r.final else {}
            writer.writerow({
                "object_id": r.object_id,
                "view_id": r.view_id,
                "failure": _cell(r.failure),
                "iterations": len(r.curve),
                **{m: _cell(final.get(m)) for m in METRICS},
                "psnr_cross": _cell(r.psnr_cross),
                "de_cross": _cell(r.de_cross),
                "cross_count": r.cross_count,
            })


def write_result(
    out_dir: Path, result: ExperimentResult, report_iters: tuple[int, ...] = ()
) -> ExperimentSummary:
    """Write curves, records and summary for one experiment into `out_dir`."""
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = write_curves_csv(out_dir / "curves.csv", result)
    write_records_csv(out_dir / "records.csv", result)
    summary = result.summary(report_iters)
    (out_dir / "summary.json").write_text(summary.model_dump_json(indent=2), encoding="utf-8")
    log.info(
        "%s: %d records (%d failed), %d curve rows -> %s",
        result.name, len(result.records), result.failed_count, rows, out_dir,
    )
    return summary
