# roi_cae/config.py
"""Experiment configuration schemas and loading."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import voluptuous as vol

from .const import (
    CONF_ABLATION_HORIZON,
    CONF_BATCH_SIZE,
    CONF_BOTTLENECK_CHANNELS,
    CONF_CHANNELS,
    CONF_ENABLED_TERMS,
    CONF_INPUT_HEIGHT,
    CONF_INPUT_WIDTH,
    CONF_LATENT_DIM,
    CONF_LEAKY_SLOPE,
    CONF_LR_P1,
    CONF_LR_P2,
    CONF_MAX_CONCURRENT_RUNS,
    CONF_MAX_EPOCHS_P1,
    CONF_MAX_EPOCHS_P2,
    CONF_MIN_DELTA_P1,
    CONF_MIN_DELTA_P2,
    CONF_MODEL,
    CONF_PATIENCE_P1,
    CONF_PATIENCE_P2,
    CONF_PIN_GLOBAL_WEIGHT,
    CONF_RUN_TIMEOUT,
    CONF_SEEDS,
    CONF_SITES,
    CONF_TRAIN,
    DEFAULT_ABLATION_HORIZON,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BOTTLENECK_CHANNELS,
    DEFAULT_CANVAS,
    DEFAULT_CHANNELS,
    DEFAULT_LATENT_DIM,
    DEFAULT_LEAKY_SLOPE,
    DEFAULT_LR_P1,
    DEFAULT_LR_P2,
    DEFAULT_MAX_CONCURRENT_RUNS,
    DEFAULT_MAX_EPOCHS,
    DEFAULT_MIN_DELTA_P1,
    DEFAULT_MIN_DELTA_P2,
    DEFAULT_PATIENCE_P1,
    DEFAULT_PATIENCE_P2,
    DEFAULT_SEEDS,
    LOSS_TERMS,
)
from .exceptions import ConfigValidationError
from .model import CaeConfig
from .phantom import SiteProfile, default_site_profiles
from .trainer import TrainConfig

_LOGGER = logging.getLogger(__name__)

_POSITIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
_NON_NEGATIVE_FLOAT = vol.All(vol.Coerce(float), vol.Range(min=0))
_POSITIVE_INT = vol.All(vol.Coerce(int), vol.Range(min=1))


def _divisible_by_16(value: int) -> int:
    if value % 16:
        raise vol.Invalid(f"{value} is not divisible by 16")
    return value


TRAIN_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_LR_P1, default=DEFAULT_LR_P1): _POSITIVE_FLOAT,
        vol.Optional(CONF_LR_P2, default=DEFAULT_LR_P2): _POSITIVE_FLOAT,
        vol.Optional(CONF_BATCH_SIZE, default=DEFAULT_BATCH_SIZE): _POSITIVE_INT,
        vol.Optional(CONF_MAX_EPOCHS_P1, default=DEFAULT_MAX_EPOCHS): _POSITIVE_INT,
        vol.Optional(CONF_MAX_EPOCHS_P2, default=DEFAULT_MAX_EPOCHS): _POSITIVE_INT,
        vol.Optional(CONF_PATIENCE_P1, default=DEFAULT_PATIENCE_P1): _POSITIVE_INT,
        vol.Optional(CONF_PATIENCE_P2, default=DEFAULT_PATIENCE_P2): _POSITIVE_INT,
        vol.Optional(CONF_MIN_DELTA_P1, default=DEFAULT_MIN_DELTA_P1): _NON_NEGATIVE_FLOAT,
        vol.Optional(CONF_MIN_DELTA_P2, default=DEFAULT_MIN_DELTA_P2): _NON_NEGATIVE_FLOAT,
        vol.Optional(CONF_SEEDS, default=list(DEFAULT_SEEDS)): vol.All(
            [vol.Coerce(int)], vol.Length(min=1)
        ),
        vol.Optional(CONF_ENABLED_TERMS, default=list(LOSS_TERMS)): vol.All(
            [vol.In(LOSS_TERMS)], vol.Length(min=1)
        ),
        vol.Optional(
            CONF_ABLATION_HORIZON, default=DEFAULT_ABLATION_HORIZON
        ): _POSITIVE_INT,
        vol.Optional(CONF_PIN_GLOBAL_WEIGHT, default=False): vol.Boolean(),
    }
)

MODEL_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_INPUT_HEIGHT, default=DEFAULT_CANVAS[1]): vol.All(
            _POSITIVE_INT, _divisible_by_16
        ),
        vol.Optional(CONF_INPUT_WIDTH, default=DEFAULT_CANVAS[0]): vol.All(
            _POSITIVE_INT, _divisible_by_16
        ),
        vol.Optional(CONF_CHANNELS, default=list(DEFAULT_CHANNELS)): vol.All(
            [_POSITIVE_INT], vol.Length(min=4, max=4)
        ),
        vol.Optional(
            CONF_BOTTLENECK_CHANNELS, default=DEFAULT_BOTTLENECK_CHANNELS
        ): _POSITIVE_INT,
        vol.Optional(CONF_LATENT_DIM, default=DEFAULT_LATENT_DIM): vol.All(
            vol.Coerce(int), vol.Range(min=8)
        ),
        vol.Optional(CONF_LEAKY_SLOPE, default=DEFAULT_LEAKY_SLOPE): _POSITIVE_FLOAT,
    }
)

SITE_SCHEMA = vol.Schema(
    {
        vol.Required("site_id"): vol.All(str, vol.Length(min=1)),
        vol.Required("gain"): _POSITIVE_FLOAT,
        vol.Required("gamma"): _POSITIVE_FLOAT,
        vol.Required("speckle_sigma"): _NON_NEGATIVE_FLOAT,
        vol.Optional("speckle_corr_len", default=1.5): _NON_NEGATIVE_FLOAT,
        vol.Optional("vignette", default=0.0): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)
        ),
        vol.Optional("fov_inset", default=0.0): vol.All(
            vol.Coerce(float), vol.Range(min=0, max=0.3)
        ),
        vol.Optional("raw_size", default=[200, 140]): vol.All(
            [vol.All(vol.Coerce(int), vol.Range(min=8))], vol.Length(min=2, max=2)
        ),
    }
)

EXPERIMENT_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_TRAIN, default={}): TRAIN_SCHEMA,
        vol.Optional(CONF_MODEL, default={}): MODEL_SCHEMA,
        vol.Optional(CONF_SITES, default=[]): [SITE_SCHEMA],
        vol.Optional(
            CONF_MAX_CONCURRENT_RUNS, default=DEFAULT_MAX_CONCURRENT_RUNS
        ): _POSITIVE_INT,
        vol.Optional(CONF_RUN_TIMEOUT, default=None): vol.Any(None, _POSITIVE_FLOAT),
    }
)


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: CaeConfig = field(default_factory=CaeConfig)
    sites: list[SiteProfile] = field(default_factory=default_site_profiles)
    max_concurrent_runs: int = DEFAULT_MAX_CONCURRENT_RUNS
    run_timeout: Optional[float] = None

    def as_dict(self) -> dict[str, Any]:
        return {
            CONF_TRAIN: self.train.as_dict(),
            CONF_MODEL: self.model.as_dict(),
            CONF_SITES: [
                {**vars(site), "raw_size": list(site.raw_size)} for site in self.sites
            ],
            CONF_MAX_CONCURRENT_RUNS: self.max_concurrent_runs,
            CONF_RUN_TIMEOUT: self.run_timeout,
        }


def _format_invalid(err: vol.Invalid) -> str:
    path = ".".join(str(part) for part in err.path) or "<root>"
    return f"{path}: {err.msg}"


def parse_config(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Validate a raw mapping; missing keys take their defaults."""
    try:
        data = EXPERIMENT_SCHEMA(dict(raw))
    except vol.MultipleInvalid as err:
        details = "; ".join(_format_invalid(e) for e in err.errors)
        raise ConfigValidationError(
            f"Invalid experiment config: {details}", error_details=details
        ) from err
    except vol.Invalid as err:
        raise ConfigValidationError(
            f"Invalid experiment config: {_format_invalid(err)}",
            error_details=_format_invalid(err),
        ) from err

    train = data[CONF_TRAIN]
    model = data[CONF_MODEL]
    sites = [
        SiteProfile(**{**site, "raw_size": tuple(site["raw_size"])})
        for site in data[CONF_SITES]
    ] or default_site_profiles()
    return ExperimentConfig(
        train=TrainConfig(**train),
        model=CaeConfig(**model),
        sites=sites,
        max_concurrent_runs=data[CONF_MAX_CONCURRENT_RUNS],
        run_timeout=data[CONF_RUN_TIMEOUT],
    )


def load_config(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Read and validate a JSON config file; defaults when ``path`` is None."""
    if path is None:
        return parse_config({})
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigValidationError(
            f"Cannot read config {path}: {err}", error_details=str(path)
        ) from err
    except json.JSONDecodeError as err:
        raise ConfigValidationError(
            f"Config {path} is not valid JSON: {err}", error_details=str(path)
        ) from err
    if not isinstance(raw, dict):
        raise ConfigValidationError(f"Config {path} must contain a JSON object")
    _LOGGER.debug("Loaded experiment config from %s", path)
    return parse_config(raw)
