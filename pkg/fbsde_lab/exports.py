"""Writers for result artifacts.

Every CSV starts with one ``#`` metadata line (command and config hash), then
the header row. Nothing time-dependent is written, so identical configs give
identical files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)


def config_hash(payload: dict) -> str:
    canonical = json.dumps(to_jsonable(payload), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def to_jsonable(value):
    """numpy scalars/arrays to Python, NaN and inf to None."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def metadata_line(command: str, config_sha: str, **extra) -> str:
    fields = [f"command={command}", f"config_sha256={config_sha}"]
    fields += [f"{k}={v}" for k, v in sorted(extra.items())]
    return "# " + " ".join(fields)


def write_csv(frame: pd.DataFrame, path: Path, command: str, config_sha: str, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(metadata_line(command, config_sha, **extra) + "\n")
        frame.to_csv(fh, index=False, lineterminator="\n", float_format="%.17g")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path


def read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#")


def write_json(payload: dict | list, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_jsonable(payload), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def write_parquet(frame: pd.DataFrame, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_parquet(path, engine="pyarrow", index=False)
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path
