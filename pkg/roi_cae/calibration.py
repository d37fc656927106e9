# roi_cae/calibration.py
"""Gradient-norm calibration of the Phase-2 loss weights."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from .const import (
    LOSS_TERMS,
    MIN_CALIBRATION_BATCH,
    PACKAGE_VERSION,
    PHASE_1,
    TERM_EDGE,
    TERM_GLOBAL,
    TERM_L1,
)
from .exceptions import CalibrationError, DatasetIOError
from .losses import batch_masks, phase2_components
from .model import Checkpoint
from .optim import grad_global_norm
from .phantom import Sample
from .tensor import Tensor, backward

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    glob: float = 1.0
    l1: float = 0.0
    edge: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {TERM_GLOBAL: self.glob, TERM_L1: self.l1, TERM_EDGE: self.edge}

    @classmethod
    def from_dict(cls, payload: Mapping[str, float]) -> LossWeights:
        return cls(
            glob=float(payload.get(TERM_GLOBAL, 0.0)),
            l1=float(payload.get(TERM_L1, 0.0)),
            edge=float(payload.get(TERM_EDGE, 0.0)),
        )


@dataclass
class CalibrationReport:
    """Averaged gradient norms, resulting weights and their balance residual."""

    norms: dict[str, float]
    weights: LossWeights
    enabled_terms: tuple[str, ...]
    pin_global: bool = False
    balance_residual: float = 0.0
    batch_ids: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, Any]:
        return {
            "package_version": PACKAGE_VERSION,
            "norms": self.norms,
            "weights": self.weights.as_dict(),
            "enabled_terms": list(self.enabled_terms),
            "pin_global": self.pin_global,
            "balance_residual": self.balance_residual,
            "batch_ids": self.batch_ids,
        }

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        try:
            path.write_text(json.dumps(self.as_dict(), indent=2, sort_keys=True))
        except OSError as err:
            raise DatasetIOError(
                f"Cannot write calibration report {path}: {err}",
                error_details=str(path),
            ) from err
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> CalibrationReport:
        path = Path(path)
        try:
            payload = json.loads(path.read_text())
            return cls(
                norms={k: float(v) for k, v in payload["norms"].items()},
                weights=LossWeights.from_dict(payload["weights"]),
                enabled_terms=tuple(payload["enabled_terms"]),
                pin_global=bool(payload.get("pin_global", False)),
                balance_residual=float(payload.get("balance_residual", 0.0)),
                batch_ids=list(payload.get("batch_ids", [])),
            )
        except (OSError, ValueError, KeyError, TypeError) as err:
            raise DatasetIOError(
                f"Cannot read calibration report {path}: {err}",
                error_details=str(path),
            ) from err


def weights_from_norms(
    norms: Mapping[str, float],
    enabled_terms: Sequence[str] = LOSS_TERMS,
    pin_global: bool = False,
) -> LossWeights:
    """λ_k ∝ 1/ḡ_k over enabled terms, normalized to sum 1.

    Disabled terms and terms with a zero norm get λ = 0. With ``pin_global``
    λ_glob is fixed at 1 and the others are ḡ_glob / ḡ_k.
    """
    active = []
    for term in LOSS_TERMS:
        if term not in enabled_terms:
            continue
        value = float(norms.get(term, 0.0))
        if not np.isfinite(value) or value < 0:
            raise CalibrationError(f"Gradient norm for '{term}' is invalid: {value}")
        if value == 0.0:
            _LOGGER.warning(
                "Loss term '%s' has zero gradient norm; its weight is set to 0", term
            )
            continue
        active.append(term)
    if not active:
        raise CalibrationError(
            "Every enabled loss term has zero gradient norm; the model is degenerate",
            error_details=str(dict(norms)),
        )

    weights = {term: 0.0 for term in LOSS_TERMS}
    if pin_global:
        if TERM_GLOBAL not in active:
            raise CalibrationError("Pinned global weight needs a nonzero global norm")
        for term in active:
            weights[term] = norms[TERM_GLOBAL] / norms[term]
    else:
        inverse = {term: 1.0 / norms[term] for term in active}
        total = sum(inverse.values())
        for term in active:
            weights[term] = inverse[term] / total
    return LossWeights.from_dict(weights)


def balance_residual(norms: Mapping[str, float], weights: LossWeights) -> float:
    """Relative spread of λ_k·ḡ_k over the terms with nonzero weight."""
    products = [
        weights.as_dict()[term] * norms[term]
        for term in LOSS_TERMS
        if weights.as_dict()[term] > 0
    ]
    if not products:
        return 0.0
    return (max(products) - min(products)) / max(products)


def term_gradient_norms(
    checkpoint: Checkpoint,
    samples: Sequence[Sample],
    terms: Sequence[str] = LOSS_TERMS,
) -> dict[str, float]:
    """Per-sample ‖∇θ L_k‖ over all parameters, averaged across the batch."""
    model = checkpoint.model()
    canvas = model.config.canvas
    totals = {term: 0.0 for term in terms}
    for sample in samples:
        x = sample.image[None, None]
        mask = batch_masks([sample.roi], canvas)
        for term in terms:
            params = model.tensors()
            x_hat, _, _ = model.forward(Tensor(x), params)
            loss = phase2_components(x, x_hat, mask, [term])[term]
            grads = backward(loss, params)
            totals[term] += grad_global_norm(grads)
    return {term: totals[term] / len(samples) for term in terms}


def calibrate_weights(
    checkpoint: Checkpoint,
    calib_batch: Sequence[Sample],
    enabled_terms: Optional[Sequence[str]] = None,
    pin_global: bool = False,
) -> CalibrationReport:
    """Balance the Phase-2 terms on a fixed batch using a Phase-1 checkpoint."""
    if checkpoint.phase != PHASE_1:
        raise CalibrationError(
            f"Calibration needs a Phase-1 checkpoint, got phase {checkpoint.phase}"
        )
    if len(calib_batch) < MIN_CALIBRATION_BATCH:
        raise CalibrationError(
            f"Calibration batch has {len(calib_batch)} samples; "
            f"need at least {MIN_CALIBRATION_BATCH}"
        )
    enabled = tuple(LOSS_TERMS if enabled_terms is None else enabled_terms)
    norms = term_gradient_norms(checkpoint, calib_batch, LOSS_TERMS)
    weights = weights_from_norms(norms, enabled, pin_global)
    residual = balance_residual(norms, weights)
    _LOGGER.info(
        "Calibrated weights %s from gradient norms %s (balance residual %.3g)",
        weights.as_dict(),
        norms,
        residual,
    )
    return CalibrationReport(
        norms=norms,
        weights=weights,
        enabled_terms=enabled,
        pin_global=pin_global,
        balance_residual=residual,
        batch_ids=[sample.sample_id for sample in calib_batch],
    )
