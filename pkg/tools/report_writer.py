"""JSON report and CSV table emission with byte-stable formatting."""
import json
import logging
import math
import os
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

from tools.errors import InvalidParameterError, ReportIoError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


def _ensure_parent(path: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def _check_finite(value: Any, where: str = "$") -> None:
    if isinstance(value, float) and not math.isfinite(value):
        raise InvalidParameterError(f"non-finite number at {where}")
    if isinstance(value, dict):
        for key, item in value.items():
            _check_finite(item, f"{where}.{key}")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check_finite(item, f"{where}[{i}]")


def dumps_report(report: Dict[str, Any]) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    _check_finite(report)
    return json.dumps(report, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def write_report(report: Dict[str, Any], path: str) -> str:
    """
    Write a report as UTF-8 JSON.

    Args:
        report: JSON-compatible mapping (floats must be finite)
        path: destination file

    Returns:
        The path written
    """
    text = dumps_report(report)
    try:
        _ensure_parent(path)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
    except OSError as e:
        raise ReportIoError(f"could not write report {path}: {e}") from e
    logger.info(f"Report written to {path}")
    return path


def read_report(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise ReportIoError(f"could not read report {path}: {e}") from e


def write_csv(frame: pd.DataFrame, path: str, footer: Optional[Dict[str, float]] = None) -> str:
    """
    Write a table with a header row and 17 significant digits.

    NaN cells become empty fields; infinities are rejected. ``footer`` adds
    ``# key=value`` lines after the data.

    Args:
        frame: table to write
        path: destination file
        footer: optional summary values

    Returns:
        The path written
    """
    numeric = frame.select_dtypes(include=[np.number])
    if numeric.size and np.isinf(numeric.to_numpy(dtype=float)).any():
        raise InvalidParameterError(f"infinite value in table for {path}")
    text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
    if footer:
        for key in sorted(footer):
            value = footer[key]
            if isinstance(value, float) and not math.isfinite(value):
                continue
            rendered = FLOAT_FORMAT % value if isinstance(value, float) else str(value)
            text += f"# {key}={rendered}\n"
    try:
        _ensure_parent(path)
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(text)
    except OSError as e:
        raise ReportIoError(f"could not write table {path}: {e}") from e
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return path
