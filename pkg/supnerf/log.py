"""Structured logging for supnerf.

Works in both interactive (rich-formatted) and batch (plain) contexts.
Everything goes to stderr; stdout belongs to machine-readable tables.
"""

from __future__ import annotations

import logging
import os
import sys
import time
from collections.abc import Generator
from contextlib import contextmanager

from rich.console import Console

_PLAIN_FORMAT = "%(asctime)s [%(name)s] %(levelname)s %(message)s"

stderr_console = Console(stderr=True)


def setup_logging(level: str = "INFO") -> None:
    """Configure the `supnerf` logger.

    Uses rich formatting when stderr is a terminal, plain lines otherwise
    (or when SUPNERF_PLAIN_LOGS=1).
    """
    log_level = getattr(logging, level.upper(), logging.INFO)

    plain = os.environ.get("SUPNERF_PLAIN_LOGS") == "1" or not sys.stderr.isatty()

    root = logging.getLogger("supnerf")
    root.setLevel(log_level)

    if root.handlers:
        return  # Already configured

    handler: logging.Handler
    if plain:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_PLAIN_FORMAT))
    else:
        from rich.logging import RichHandler

        handler = RichHandler(
            console=stderr_console,
            rich_tracebacks=True,
            show_path=False,
            markup=True,
        )

    root.addHandler(handler)


@contextmanager
def log_duration(logger: logging.Logger, task_name: str) -> Generator[None, None, None]:
    """Context manager that logs how long a task takes.

    Usage:
        with log_duration(log, "train epoch 3"):
            run_epoch()
        # logs: "train epoch 3: completed in 45.2s"
    """
    start = time.monotonic()
    logger.info("%s: starting", task_name)
    try:
        yield
        elapsed = time.monotonic() - start
        logger.info("%s: completed in %.1fs", task_name, elapsed)
    except Exception:
        elapsed = time.monotonic() - start
        logger.error("%s: failed after %.1fs", task_name, elapsed)
        raise


# Auto-configure on import
setup_logging()
