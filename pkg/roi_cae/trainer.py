# roi_cae/trainer.py
"""Two-phase training loop with early stopping."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .calibration import CalibrationReport, LossWeights, calibrate_weights
from .const import (
    DEFAULT_ABLATION_HORIZON,
    DEFAULT_BATCH_SIZE,
    DEFAULT_LR_P1,
    DEFAULT_LR_P2,
    DEFAULT_MAX_EPOCHS,
    DEFAULT_MIN_DELTA_P1,
    DEFAULT_MIN_DELTA_P2,
    DEFAULT_PATIENCE_P1,
    DEFAULT_PATIENCE_P2,
    DEFAULT_SEEDS,
    LOSS_TERMS,
    PHASE_1,
    PHASE_2,
    PHASES,
    TRACE_COLUMNS,
)
from .exceptions import (
    ConfigValidationError,
    DatasetIOError,
    NonFiniteError,
    SplitError,
)
from .losses import batch_masks, phase1_loss, phase2_total
from .model import Checkpoint, ConvAutoencoder
from .optim import AdamState, adam_step
from .phantom import Sample
from .tensor import Rng, Tensor, backward

_LOGGER = logging.getLogger(__name__)

LossFn = Callable[[np.ndarray, Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class PhaseSettings:
    lr: float
    max_epochs: int
    patience: int
    min_delta: float


@dataclass(frozen=True)
class TrainConfig:
    lr_p1: float = DEFAULT_LR_P1
    lr_p2: float = DEFAULT_LR_P2
    batch_size: int = DEFAULT_BATCH_SIZE
    max_epochs_p1: int = DEFAULT_MAX_EPOCHS
    max_epochs_p2: int = DEFAULT_MAX_EPOCHS
    patience_p1: int = DEFAULT_PATIENCE_P1
    patience_p2: int = DEFAULT_PATIENCE_P2
    min_delta_p1: float = DEFAULT_MIN_DELTA_P1
    min_delta_p2: float = DEFAULT_MIN_DELTA_P2
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    enabled_terms: tuple[str, ...] = LOSS_TERMS
    ablation_horizon: int = DEFAULT_ABLATION_HORIZON
    pin_global_weight: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "enabled_terms", tuple(self.enabled_terms))
        if self.lr_p1 <= 0 or self.lr_p2 <= 0:
            raise ConfigValidationError("Learning rates must be positive")
        if self.patience_p1 < 1 or self.patience_p2 < 1:
            raise ConfigValidationError("Early-stopping patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigValidationError("batch_size must be >= 1")
        if min(self.max_epochs_p1, self.max_epochs_p2, self.ablation_horizon) < 1:
            raise ConfigValidationError("Epoch counts must be >= 1")
        if not self.seeds:
            raise ConfigValidationError("At least one seed is required")
        unknown = set(self.enabled_terms) - set(LOSS_TERMS)
        if unknown:
            raise ConfigValidationError(f"Unknown loss terms {sorted(unknown)}")

    def phase_settings(self, phase: str) -> PhaseSettings:
        if phase == PHASE_1:
            return PhaseSettings(
                self.lr_p1, self.max_epochs_p1, self.patience_p1, self.min_delta_p1
            )
        if phase == PHASE_2:
            return PhaseSettings(
                self.lr_p2, self.max_epochs_p2, self.patience_p2, self.min_delta_p2
            )
        raise ConfigValidationError(f"Unknown phase '{phase}' (expected {PHASES})")

    def as_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["seeds"] = list(self.seeds)
        payload["enabled_terms"] = list(self.enabled_terms)
        return payload


@dataclass(frozen=True)
class EarlyStopState:
    best_loss: float = float("inf")
    since_improvement: int = 0
    best_epoch: int = 0
    epoch: int = 0


def early_stop_update(
    state: EarlyStopState, val_loss: float, patience: int, min_delta: float
) -> tuple[EarlyStopState, bool]:
    """Improvement iff ``val_loss < best - min_delta``; stop once the counter
    reaches ``patience``."""
    if not np.isfinite(val_loss):
        raise NonFiniteError(
            f"Validation loss is not finite at epoch {state.epoch + 1}"
        )
    epoch = state.epoch + 1
    if val_loss < state.best_loss - min_delta:
        new_state = EarlyStopState(val_loss, 0, epoch, epoch)
    else:
        new_state = replace(
            state, since_improvement=state.since_improvement + 1, epoch=epoch
        )
    return new_state, new_state.since_improvement >= patience


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    train_loss: float
    val_loss: float
    stopped_flag: bool = False


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: list[TraceRow]
    best_epoch: int
    stopped_early: bool
    weights: Optional[LossWeights] = None
    calibration: Optional[CalibrationReport] = None


def save_trace_csv(trace: Sequence[TraceRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    frame = pd.DataFrame([asdict(row) for row in trace], columns=list(TRACE_COLUMNS))
    frame["stopped_flag"] = frame["stopped_flag"].astype(int)
    try:
        frame.to_csv(path, index=False, float_format="%.12g")
    except OSError as err:
        raise DatasetIOError(
            f"Cannot write trace {path}: {err}", error_details=str(path)
        ) from err
    return path


def _stack(samples: Sequence[Sample], canvas: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([sample.image for sample in samples])[:, None]
    return images, batch_masks([sample.roi for sample in samples], canvas)


def _loss_fn(phase: str, weights: Optional[LossWeights]) -> LossFn:
    if phase == PHASE_1:
        return lambda x, x_hat, mask: phase1_loss(x, x_hat)
    assert weights is not None
    return lambda x, x_hat, mask: phase2_total(x, x_hat, mask, weights)


def evaluate_loss(
    model: ConvAutoencoder,
    images: np.ndarray,
    masks: np.ndarray,
    loss_fn: LossFn,
    batch_size: int,
) -> float:
    """Sample-weighted mean loss over fixed-order batches, no tape."""
    params = model.tensors(requires_grad=False)
    total = 0.0
    for start in range(0, images.shape[0], batch_size):
        x = images[start : start + batch_size]
        x_hat, _, _ = model.forward(Tensor(x), params)
        total += loss_fn(x, x_hat, masks[start : start + batch_size]).item() * len(x)
    return total / images.shape[0]


def train_phase(
    model: ConvAutoencoder,
    train_samples: Sequence[Sample],
    val_samples: Sequence[Sample],
    phase: str,
    cfg: TrainConfig,
    seed: int,
    weights: Optional[LossWeights] = None,
    fixed_horizon: Optional[int] = None,
) -> TrainResult:
    """Adam on ``phase``'s objective, validating every epoch.

    Returns the best-validation checkpoint, or the last epoch's when
    ``fixed_horizon`` is set (no early stopping). Phase 2 calibrates its
    weights on the first validation batch when none are given.
    """
    if not train_samples:
        raise SplitError(f"{phase}: training split is empty")
    if not val_samples:
        raise SplitError(f"{phase}: validation split is empty")
    settings = cfg.phase_settings(phase)

    calibration = None
    if phase == PHASE_2 and weights is None:
        calibration = calibrate_weights(
            Checkpoint.from_model(model, PHASE_1),
            list(val_samples[: cfg.batch_size]),
            cfg.enabled_terms,
            cfg.pin_global_weight,
        )
        weights = calibration.weights
    loss_fn = _loss_fn(phase, weights)

    canvas = model.config.canvas
    train_x, train_m = _stack(train_samples, canvas)
    val_x, val_m = _stack(val_samples, canvas)
    shuffle = Rng(seed).stream(f"shuffle/{phase}")
    adam = AdamState(lr=settings.lr)
    max_epochs = fixed_horizon if fixed_horizon is not None else settings.max_epochs

    _LOGGER.info(
        "%s training: %d train / %d val samples, up to %d epochs (lr %g, seed %d)",
        phase,
        len(train_samples),
        len(val_samples),
        max_epochs,
        settings.lr,
        seed,
    )
    stop_state = EarlyStopState()
    best_params = {name: block.copy() for name, block in model.params.items()}
    trace: list[TraceRow] = []
    stopped_early = False
    n_train = train_x.shape[0]

    for epoch in range(1, max_epochs + 1):
        order = shuffle.permutation(n_train)
        running = 0.0
        for batch_index, start in enumerate(range(0, n_train, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            x = train_x[idx]
            params = model.tensors()
            x_hat, _, _ = model.forward(Tensor(x), params)
            loss = loss_fn(x, x_hat, train_m[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(
                    f"{phase} loss is not finite at epoch {epoch}, batch {batch_index}",
                    error_details=f"epoch={epoch} batch={batch_index}",
                )
            grads = backward(loss, params)
            try:
                new_params, adam = adam_step(model.params, grads, adam)
            except NonFiniteError as err:
                raise NonFiniteError(
                    f"{phase}: {err} at epoch {epoch}, batch {batch_index}",
                    error_details=err.error_details,
                ) from err
            model = model.with_params(new_params)
            running += value * len(idx)
            _LOGGER.debug("%s epoch %d batch %d loss %.6f", phase, epoch, batch_index, value)

        train_loss = running / n_train
        val_loss = evaluate_loss(model, val_x, val_m, loss_fn, cfg.batch_size)
        if fixed_horizon is not None:
            should_stop = False
            if not np.isfinite(val_loss):
                raise NonFiniteError(f"{phase} validation loss is not finite at epoch {epoch}")
        else:
            stop_state, should_stop = early_stop_update(
                stop_state, val_loss, settings.patience, settings.min_delta
            )
            if stop_state.best_epoch == epoch:
                best_params = {name: block.copy() for name, block in model.params.items()}
        trace.append(TraceRow(epoch, train_loss, val_loss, should_stop))
        _LOGGER.info(
            "%s epoch %d: train %.6f, val %.6f", phase, epoch, train_loss, val_loss
        )
        if should_stop:
            stopped_early = True
            _LOGGER.info(
                "%s early stop after epoch %d (best epoch %d, val %.6f)",
                phase,
                epoch,
                stop_state.best_epoch,
                stop_state.best_loss,
            )
            break

    if fixed_horizon is not None:
        best_epoch = len(trace)
        final_params = model.params
    else:
        best_epoch = stop_state.best_epoch
        final_params = best_params

    metadata: dict[str, Any] = {
        "epoch": best_epoch,
        "seed": seed,
        "epochs_run": len(trace),
        "stopped_early": stopped_early,
    }
    if weights is not None and phase == PHASE_2:
        metadata["loss_weights"] = weights.as_dict()
    checkpoint = Checkpoint(
        config=model.config,
        params={name: block.copy() for name, block in final_params.items()},
        phase=phase,
        metadata=metadata,
    )
    return TrainResult(
        checkpoint=checkpoint,
        trace=trace,
        best_epoch=best_epoch,
        stopped_early=stopped_early,
        weights=weights if phase == PHASE_2 else None,
        calibration=calibration,
    )
