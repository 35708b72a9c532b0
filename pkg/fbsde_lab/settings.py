"""Environment-backed defaults.

Values come from ``.env`` (via python-dotenv) or the process environment;
see ``.env.example`` for the full list.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from functools import lru_cache

from dotenv import load_dotenv

from .errors import ConfigInvalidError


@dataclass(frozen=True)
class Settings:
    output_dir: str = "exports/results"
    threads: int = 1
    log_level: str = "INFO"
    c_k: float = 1.0
    lipschitz_cap: float = 1e6
    escape_factor: float = 1.0
    escape_tolerance: float = 0.01
    fd_step: float = 1e-5


def _env_number(name: str, default, cast):
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return cast(raw)
    except ValueError as exc:
        raise ConfigInvalidError(f"{name}={raw!r} is not a valid {cast.__name__}") from exc


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Load ``.env`` once and build the settings object."""
    load_dotenv()
    settings = Settings(
        output_dir=os.getenv("FBSDE_OUTPUT_DIR", Settings.output_dir),
        threads=_env_number("FBSDE_THREADS", Settings.threads, int),
        log_level=os.getenv("FBSDE_LOG_LEVEL", Settings.log_level).upper(),
        c_k=_env_number("FBSDE_C_K", Settings.c_k, float),
        lipschitz_cap=_env_number("FBSDE_LIPSCHITZ_CAP", Settings.lipschitz_cap, float),
        escape_factor=_env_number("FBSDE_ESCAPE_FACTOR", Settings.escape_factor, float),
        escape_tolerance=_env_number("FBSDE_ESCAPE_TOLERANCE", Settings.escape_tolerance, float),
        fd_step=_env_number("FBSDE_FD_STEP", Settings.fd_step, float),
    )
    if settings.threads < 1:
        raise ConfigInvalidError("FBSDE_THREADS must be >= 1")
    if settings.c_k < 0:
        raise ConfigInvalidError("FBSDE_C_K must be >= 0")
    if settings.fd_step <= 0:
        raise ConfigInvalidError("FBSDE_FD_STEP must be > 0")
    return settings
