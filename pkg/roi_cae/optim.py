# roi_cae/optim.py
"""Adam optimizer and gradient-norm queries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional

import numpy as np

from .const import ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON
from .exceptions import NonFiniteError, ShapeMismatchError

_LOGGER = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moment accumulators and step counter for one parameter set.

    ``weight_decay`` adds ``weight_decay * param`` to each gradient before the
    moment update (classic L2, not decoupled).
    """

    lr: float
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPSILON
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"Adam learning rate must be positive, got {self.lr}")


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    missing = set(params) - set(grads)
    if missing:
        raise ShapeMismatchError(
            f"No gradient supplied for parameters: {sorted(missing)}"
        )
    for name, grad in grads.items():
        if name not in params:
            continue
        if grad.shape != params[name].shape:
            raise ShapeMismatchError(
                f"Gradient for '{name}' has shape {grad.shape}, "
                f"parameter has {params[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError(
                f"Non-finite gradient for parameter '{name}'", error_details=name
            )

    state.t += 1
    bias1 = 1.0 - state.beta1**state.t
    bias2 = 1.0 - state.beta2**state.t
    updated: dict[str, np.ndarray] = {}
    for name, value in params.items():
        grad = grads[name]
        if state.weight_decay:
            grad = grad + state.weight_decay * value
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or v is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / bias1
        v_hat = v / bias2
        updated[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    _LOGGER.debug("Adam step %d over %d parameter blocks", state.t, len(updated))
    return updated, state


def grad_global_norm(
    grads: Mapping[str, np.ndarray], names: Optional[Iterable[str]] = None
) -> float:
    """L2 norm over the concatenation of the selected gradient blocks."""
    selected = list(grads) if names is None else list(names)
    if not selected:
        raise ValueError("grad_global_norm needs a nonempty parameter set")
    total = 0.0
    for name in selected:
        block = grads[name]
        total += float(np.sum(block * block))
    return float(np.sqrt(total))
