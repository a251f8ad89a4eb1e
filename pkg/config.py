"""Centralized paths for supnerf."""

from __future__ import annotations

from pathlib import Path

ROOT_DIR = Path(__file__).parent
RUNS_DIR = ROOT_DIR / "runs"

GRADCHECK_REPORT_PATH = RUNS_DIR / "gradcheck.json"
