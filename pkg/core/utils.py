"""
Utility helpers shared across detector components.
"""

from __future__ import annotations

import logging
import os
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

DEFAULT_LOG_LEVEL = "INFO"


def configure_logger(name: str, log_file: Optional[Path] = None) -> logging.Logger:
    """
    Configure and return a logger that writes to stderr and optional file.
    """
    logger = logging.getLogger(name)
    if logger.handlers:  # reuse existing configuration
        return logger

    level_name = os.getenv("IRNET_LOG_LEVEL", DEFAULT_LOG_LEVEL).upper()
    logger.setLevel(getattr(logging, level_name, logging.INFO))
    formatter = logging.Formatter(
        "%(asctime)s [%(levelname)s] %(name)s - %(message)s",
        "%Y-%m-%d %H:%M:%S%z",
    )

    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)

    if log_file:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    logger.propagate = False
    return logger


def now_utc() -> datetime:
    """Return a timezone-aware UTC timestamp."""
    return datetime.now(tz=timezone.utc)


def _format_value(value: Any) -> str:
    if value is None:
        return "absent"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.10g}"
    text = str(value)
    return text.replace(" ", "_")


def format_record(**fields: Any) -> str:
    """
    Render one machine-readable line of ``key=value`` pairs, in argument order.
    """
    return " ".join(f"{key}={_format_value(value)}" for key, value in fields.items())


def parse_record(line: str) -> dict[str, str]:
    """Inverse of :func:`format_record` for plain tokens."""
    record: dict[str, str] = {}
    for token in line.split():
        key, sep, value = token.partition("=")
        if sep:
            record[key] = value
    return record


def worker_count(default: int | None = None) -> int:
    """
    Number of worker threads for per-item parallel work, capped by IRNET_THREADS.
    """
    cpu = os.cpu_count() or 1
    limit = default if default is not None else cpu
    env_threads = os.getenv("IRNET_THREADS")
    if env_threads is not None:
        try:
            limit = min(limit, int(env_threads))
        except ValueError:
            pass
    return max(1, limit)
