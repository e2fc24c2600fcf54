"""
Runtime settings resolved from the environment.

Values can be placed in a ``.env`` file; ``load_settings`` calls
``load_dotenv`` before reading them.
"""

import logging
import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

from .errors import ConfigError

logger = logging.getLogger(__name__)

_MAX_WORKERS = 32


def _default_workers() -> int:
    return max(1, min(os.cpu_count() or 1, _MAX_WORKERS))


def _int_from_env(name: str, default: int, minimum: int = 1) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"{name} must be an integer, got {raw!r}") from e
    if value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


@dataclass
class RuntimeSettings:
    """Process-wide knobs that are not part of a scenario."""

    workers: int = 0
    chunk_size: int = 65_536
    log_level: str = "INFO"
    out_dir: str = "results"

    def __post_init__(self):
        # Environment overrides win over constructor defaults
        self.workers = _int_from_env("LEMIE_WORKERS", self.workers or _default_workers())
        self.workers = min(self.workers, _MAX_WORKERS)
        self.chunk_size = _int_from_env("LEMIE_CHUNK_SIZE", self.chunk_size)
        self.log_level = os.getenv("LEMIE_LOG_LEVEL", self.log_level).upper()
        if not isinstance(logging.getLevelName(self.log_level), int):
            raise ConfigError(f"unknown log level {self.log_level!r}")
        self.out_dir = os.getenv("LEMIE_OUT_DIR", self.out_dir)


def load_settings(dotenv_path: Optional[str] = None) -> RuntimeSettings:
    """Load ``.env`` (if present) and build the settings object."""
    load_dotenv(dotenv_path)
    settings = RuntimeSettings()
    logger.debug(f"Runtime settings: {settings}")
    return settings
