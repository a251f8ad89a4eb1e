"""Pass/fail assertions over experiment results.

Desk-scale experiments do not raise on a failed expectation; each one returns
CheckResults so the caller can log them and decide the exit status.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

log = logging.getLogger(__name__)


@dataclass
class CheckResult:
    experiment: str
    check: str
    passed: bool
    detail: str


def fmt(value: float | None, unit: str = "") -> str:
    return "n/a" if value is None else f"{value:.3f}{unit}"


def check_less(
    experiment: str, check: str, lhs: float | None, rhs: float | None, unit: str = ""
) -> CheckResult:
    """lhs < rhs; undefined values fail."""
    passed = lhs is not None and rhs is not None and lhs < rhs
    return CheckResult(experiment, check, passed, f"{fmt(lhs, unit)} < {fmt(rhs, unit)}")


def check_at_most(
    experiment: str, check: str, value: float | None, bound: float, unit: str = ""
) -> CheckResult:
    passed = value is not None and value <= bound
    return CheckResult(experiment, check, passed, f"{fmt(value, unit)} <= {fmt(bound, unit)}")


def report(results: list[CheckResult]) -> bool:
    """Log results, return True if all passed."""
    failures = [r for r in results if not r.passed]
    log.info("Experiment checks: %d passed, %d failed", len(results) - len(failures), len(failures))
    for r in results:
        if r.passed:
            log.info("  PASS %s/%s: %s", r.experiment, r.check, r.detail)
        else:
            log.warning("  FAIL %s/%s: %s", r.experiment, r.check, r.detail)
    return not failures
