"""Result tables, their DuckDB aggregation and the experiment checks."""

from __future__ import annotations

import json

import pytest

from supnerf.checks import check_at_most, check_less, report
from supnerf.db import cross_view_means, final_medians, get_conn, stage_medians
from supnerf.results import CurvePoint, ExperimentResult, RecordResult, median_of, write_result


def record(
    object_id: int, re_values: list[float], psnr_final: float | None, **extra
) -> RecordResult:
    stages = ["init", "ff"] + ["nerf"] * (len(re_values) - 2)
    curve = [
        CurvePoint(stage=s, iter=i, re=re, te=re / 10, psnr=None, loss=1.0 / (i + 1))
        for i, (s, re) in enumerate(zip(stages, re_values, strict=True))
    ]
    curve[-1] = curve[-1].model_copy(update={"psnr": psnr_final})
    return RecordResult(object_id=object_id, view_id=0, curve=curve, **extra)


@pytest.fixture
def result() -> ExperimentResult:
    return ExperimentResult(
        name="demo",
        echo={"tool": "supnerf"},
        records=[
            record(0, [40.0, 20.0, 10.0, 6.0], 18.0, psnr_cross=15.0, de_cross=0.4, cross_count=1),
            record(1, [30.0, 12.0, 8.0, 2.0], 22.0),
            record(2, [50.0, 30.0, 20.0, 10.0], None, psnr_cross=17.0, de_cross=0.2, cross_count=1),
            RecordResult(object_id=3, view_id=0, failure="BehindCameraError: center behind camera"),
        ],
    )


def test_median_of_skips_undefined():
    assert median_of([None, 3.0, 1.0, float("nan"), 2.0]) == 2.0
    assert median_of([None]) is None


def test_summary(result):
    summary = result.summary(report_iters=(1, 2, 5))
    assert summary.records == 4
    assert summary.failed == 1
    assert summary.initial["re"] == 40.0
    assert summary.final["re"] == 6.0
    assert summary.final["psnr"] == 20.0
    assert summary.at_iters["nerf1"]["re"] == 10.0
    assert summary.at_iters["nerf2"]["re"] == 6.0
    assert "nerf5" not in summary.at_iters
    assert summary.psnr_cross == 16.0
    assert summary.de_cross == pytest.approx(0.3)


def test_written_tables_aggregate_in_duckdb(tmp_path, result):
    write_result(tmp_path, result, report_iters=(2,))
    assert {p.name for p in tmp_path.iterdir()} == {"curves.csv", "records.csv", "summary.json"}
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["echo"]["tool"] == "supnerf"

    with get_conn() as conn:
        stages = stage_medians(conn, tmp_path / "curves.csv")
        final = final_medians(conn, tmp_path / "curves.csv")
        cross = cross_view_means(conn, tmp_path / "records.csv")

    assert [(row["stage"], row["iter"], row["n"]) for row in stages] == [
        ("init", 0, 3), ("ff", 1, 3), ("nerf", 2, 3), ("nerf", 3, 3)
    ]
    assert stages[0]["re"] == 40.0
    assert stages[0]["psnr"] is None
    assert final["n"] == 3
    assert final["re"] == 6.0
    assert final["psnr"] == 20.0
    assert cross["n"] == 2
    assert cross["psnr_cross"] == pytest.approx(16.0)


def test_failed_record_is_kept_in_records_only(tmp_path, result):
    write_result(tmp_path, result)
    records = (tmp_path / "records.csv").read_text().splitlines()
    assert len(records) == 5
    assert "BehindCameraError" in records[-1]
    lines = (tmp_path / "curves.csv").read_text().splitlines()
    assert all(not line.startswith("3,") for line in lines)


def test_checks():
    passed = check_less("frame", "o2c beats c2o", 1.0, 2.0, "°")
    failed = check_at_most("sweep", "drift", 4.0, 3.0, "°")
    undefined = check_less("frame", "psnr", None, 2.0)
    assert passed.passed and passed.detail == "1.000° < 2.000°"
    assert not failed.passed
    assert not undefined.passed and "n/a" in undefined.detail
    assert report([passed])
    assert not report([passed, failed])
