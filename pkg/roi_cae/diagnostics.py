# roi_cae/diagnostics.py
"""Run snapshots: configuration, environment and per-run summaries."""

from __future__ import annotations

import json
import logging
import platform
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import numpy as np
import scipy
import sklearn

from .config import ExperimentConfig
from .const import DOMAIN, FILE_CONFIG_SNAPSHOT, PACKAGE_VERSION
from .exceptions import DatasetIOError

_LOGGER = logging.getLogger(__name__)

# Keys dropped from snapshots; they hold host-specific absolute paths.
TO_REDACT = {"manifest_root", "out_dir"}


def _redact(data: Mapping[str, Any]) -> Dict[str, Any]:
    return {
        key: ("**REDACTED**" if key in TO_REDACT else value)
        for key, value in data.items()
    }


def _json_default(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, set):
        return sorted(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(payload: Any, path: Union[str, Path]) -> Path:
    """Deterministic JSON (sorted keys, fixed indent) with path-bearing errors."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n",
            encoding="utf-8",
        )
    except (OSError, TypeError) as err:
        raise DatasetIOError(
            f"Cannot write {path}: {err}", error_details=str(path)
        ) from err
    return path


def read_json(path: Union[str, Path]) -> Any:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise DatasetIOError(f"Cannot read {path}: {err}", error_details=str(path)) from err


def build_config_snapshot(
    config: ExperimentConfig, context: Optional[Mapping[str, Any]] = None
) -> Dict[str, Any]:
    """Everything needed to re-run: config, run context and library versions."""
    snapshot: Dict[str, Any] = {
        "package": DOMAIN,
        "package_version": PACKAGE_VERSION,
        "config": config.as_dict(),
        "context": _redact(context or {}),
        "environment": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
        },
    }
    return snapshot


def write_config_snapshot(
    run_dir: Union[str, Path],
    config: ExperimentConfig,
    context: Optional[Mapping[str, Any]] = None,
) -> Path:
    path = Path(run_dir) / FILE_CONFIG_SNAPSHOT
    write_json(build_config_snapshot(config, context), path)
    _LOGGER.debug("Wrote config snapshot to %s", path)
    return path


def run_summary(
    name: str,
    seed: int,
    best_epochs: Mapping[str, int],
    metric_means: Mapping[str, Mapping[str, Mapping[str, float]]],
    weights: Optional[Mapping[str, float]] = None,
    balance_residual: Optional[float] = None,
    extra: Optional[Mapping[str, Any]] = None,
) -> Dict[str, Any]:
    """Flat summary of one finished run, as stored in protocol fragments."""
    summary: Dict[str, Any] = {
        "name": name,
        "seed": seed,
        "best_epoch": dict(best_epochs),
        "metrics": {
            phase: {split: dict(values) for split, values in splits.items()}
            for phase, splits in metric_means.items()
        },
    }
    if weights is not None:
        summary["weights"] = dict(weights)
    if balance_residual is not None:
        summary["balance_residual"] = balance_residual
    if extra:
        summary.update(extra)
    return summary
