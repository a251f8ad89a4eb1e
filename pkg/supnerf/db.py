"""DuckDB helpers for aggregating result tables.

Result CSVs are queried in place through `read_csv_auto`; nothing is imported
into a persistent database.
"""

from __future__ import annotations

import logging
from collections.abc import Generator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

import duckdb

log = logging.getLogger(__name__)

_METRICS = ("psnr", "de", "re", "te")


@contextmanager
def get_conn() -> Generator[duckdb.DuckDBPyConnection, None, None]:
    """In-memory connection for querying result CSVs, closed on exit.

    Usage:
        with get_conn() as conn:
            rows = stage_medians(conn, run_dir / "curves.csv")
    """
    conn = duckdb.connect(":memory:")
    try:
        yield conn
    finally:
        conn.close()


def csv_source(path: Path) -> str:
    """SQL table expression reading `path` with type sniffing."""
    quoted = str(path).replace("'", "''")
    return f"read_csv_auto('{quoted}', header = true)"


def _as_double(column: str) -> str:
    return f"TRY_CAST({column} AS DOUBLE)"


def _fetch_dicts(conn: duckdb.DuckDBPyConnection, sql: str) -> list[dict[str, Any]]:
    cursor = conn.execute(sql)
    names = [d[0] for d in cursor.description]
    return [dict(zip(names, row, strict=True)) for row in cursor.fetchall()]


def stage_medians(conn: duckdb.DuckDBPyConnection, curves: Path) -> list[dict[str, Any]]:
    """Per-iteration medians of every metric and the mean loss.

    Empty cells (undefined metrics) are NULL and drop out of the aggregates.
    """
    medians = ", ".join(f"median({_as_double(m)}) AS {m}" for m in _METRICS)
    sql = f"""
        SELECT stage, iter, count(*) AS n, {medians}, avg({_as_double("loss")}) AS loss
        FROM {csv_source(curves)}
        GROUP BY stage, iter
        ORDER BY iter
    """
    return _fetch_dicts(conn, sql)


def final_medians(conn: duckdb.DuckDBPyConnection, curves: Path) -> dict[str, Any]:
    """Medians over each record's last curve point."""
    medians = ", ".join(f"median({_as_double(m)}) AS {m}" for m in _METRICS)
    sql = f"""
        WITH src AS (SELECT * FROM {csv_source(curves)}),
        last AS (
            SELECT * FROM src
            QUALIFY iter = max(iter) OVER (PARTITION BY object_id, view_id)
        )
        SELECT count(*) AS n, {medians}, avg({_as_double("loss")}) AS loss FROM last
    """
    rows = _fetch_dicts(conn, sql)
    return rows[0] if rows else {}


def cross_view_means(conn: duckdb.DuckDBPyConnection, records: Path) -> dict[str, Any]:
    """Mean cross-view PSNR and depth error over records that have them."""
    sql = f"""
        SELECT
            count({_as_double("psnr_cross")}) AS n,
            avg({_as_double("psnr_cross")}) AS psnr_cross,
            avg({_as_double("de_cross")}) AS de_cross
        FROM {csv_source(records)}
        WHERE failure IS NULL OR failure = ''
    """
    rows = _fetch_dicts(conn, sql)
    return rows[0] if rows else {}
