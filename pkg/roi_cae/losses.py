# roi_cae/losses.py
"""Differentiable training objectives: MS-SSIM, ROI-L1, normalized Sobel edges."""

from __future__ import annotations

import logging
from functools import lru_cache
from typing import TYPE_CHECKING, Mapping, Sequence, Union

import numpy as np

from .const import (
    LOSS_TERMS,
    MIN_MASK_PIXELS,
    MS_SSIM_WEIGHTS,
    SOBEL_EPSILON,
    SSIM_K1,
    SSIM_K2,
    SSIM_SIGMA,
    SSIM_WINDOW,
    TERM_EDGE,
    TERM_GLOBAL,
    TERM_L1,
)
from .exceptions import CalibrationError, EmptyMaskError, ShapeMismatchError
from .preprocess import RoiBox
from .tensor import (
    Tensor,
    absolute,
    as_tensor,
    avg_pool2,
    conv2d,
    pad_replicate,
    power,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    sqrt,
)

if TYPE_CHECKING:
    from .calibration import LossWeights

_LOGGER = logging.getLogger(__name__)

ImageLike = Union[Tensor, np.ndarray]

_C1 = SSIM_K1**2
_C2 = SSIM_K2**2
_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_ZERO_BIAS = np.zeros(1)


def _as_image_batch(value: ImageLike) -> Tensor:
    """Wrap H×W / N×H×W / N×1×H×W input as an N×1×H×W tensor."""
    if isinstance(value, Tensor):
        if value.ndim != 4 or value.shape[1] != 1:
            raise ShapeMismatchError(f"Expected N×1×H×W tensor, got {value.shape}")
        return value
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeMismatchError(f"Expected grayscale image(s), got shape {arr.shape}")
    return Tensor(arr)


def _check_pair(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeMismatchError(f"Image shapes differ: {x.shape} vs {y.shape}")


# --- ROI masks ---
def roi_mask(box: RoiBox, canvas: Sequence[int]) -> np.ndarray:
    """H×W boolean mask of pixels whose centers lie inside ``box``."""
    width, height = int(canvas[0]), int(canvas[1])
    cols = np.arange(width) + 0.5
    rows = np.arange(height) + 0.5
    inside_c = (cols >= box.x1) & (cols <= box.x2)
    inside_r = (rows >= box.y1) & (rows <= box.y2)
    mask = inside_r[:, None] & inside_c[None, :]
    count = int(mask.sum())
    if count < MIN_MASK_PIXELS:
        raise EmptyMaskError(
            f"ROI {box.as_list()} covers {count} pixel centers; "
            f"at least {MIN_MASK_PIXELS} are required",
            error_details=str(box.as_list()),
        )
    return mask


def batch_masks(rois: Sequence[RoiBox], canvas: Sequence[int]) -> np.ndarray:
    """N×1×H×W float mask stack."""
    return np.stack([roi_mask(box, canvas) for box in rois])[:, None].astype(
        np.float64
    )


def _mask_array(mask: np.ndarray, like: Tensor) -> np.ndarray:
    arr = np.asarray(mask, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.shape[2:] != like.shape[2:] or arr.shape[0] not in (1, like.shape[0]):
        raise ShapeMismatchError(f"Mask {arr.shape} does not fit images {like.shape}")
    arr = np.broadcast_to(arr, like.shape)
    counts = arr.sum(axis=(1, 2, 3))
    if np.any(counts < MIN_MASK_PIXELS):
        raise EmptyMaskError(
            f"ROI mask too small: {int(counts.min())} pixels "
            f"(need {MIN_MASK_PIXELS})"
        )
    return arr


def _masked_mean(values: Tensor, mask: np.ndarray) -> Tensor:
    """Per-image mean over the mask, then the batch mean."""
    per_image = reduce_sum(values * mask, axis=(1, 2, 3)) / mask.sum(axis=(1, 2, 3))
    return reduce_mean(per_image)


# --- SSIM family ---
@lru_cache(maxsize=8)
def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    window = np.exp(-(coords**2) / (2.0 * sigma**2))
    return window / window.sum()


def _blur(x: Tensor) -> Tensor:
    window = gaussian_window()
    horizontal = conv2d(x, window.reshape(1, 1, 1, -1), _ZERO_BIAS)
    return conv2d(horizontal, window.reshape(1, 1, -1, 1), _ZERO_BIAS)


def _ssim_terms(x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
    """Per-image mean SSIM and mean contrast-structure term (both shape N)."""
    mu_x = _blur(x)
    mu_y = _blur(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    sigma_xx = _blur(x * x) - mu_xx
    sigma_yy = _blur(y * y) - mu_yy
    sigma_xy = _blur(x * y) - mu_xy
    cs_map = (2.0 * sigma_xy + _C2) / (sigma_xx + sigma_yy + _C2)
    luminance = (2.0 * mu_xy + _C1) / (mu_xx + mu_yy + _C1)
    axes = (1, 2, 3)
    return reduce_mean(luminance * cs_map, axis=axes), reduce_mean(cs_map, axis=axes)


def ms_ssim_scales(height: int, width: int, scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Largest usable scale count with min(H, W) >= 11 * 2**(scales - 1)."""
    scales = min(scales, len(MS_SSIM_WEIGHTS))
    while scales > 1 and min(height, width) < SSIM_WINDOW * 2 ** (scales - 1):
        scales -= 1
    if min(height, width) < SSIM_WINDOW:
        raise ShapeMismatchError(
            f"Image {width}x{height} is smaller than the {SSIM_WINDOW}px SSIM window"
        )
    return scales


def ms_ssim(x: ImageLike, x_hat: ImageLike, scales: int = 5) -> Tensor:
    """Batch-mean MS-SSIM; weights are renormalized when fewer scales fit."""
    tx, ty = _as_image_batch(x), _as_image_batch(x_hat)
    _check_pair(tx, ty)
    used = ms_ssim_scales(tx.shape[2], tx.shape[3], scales)
    weights = np.asarray(MS_SSIM_WEIGHTS[:used])
    weights = weights / weights.sum()
    value = None
    for level in range(used):
        ssim_term, cs_term = _ssim_terms(tx, ty)
        if level < used - 1:
            factor = power(relu(cs_term), float(weights[level]))
            tx, ty = avg_pool2(tx), avg_pool2(ty)
        else:
            factor = power(relu(ssim_term), float(weights[level]))
        value = factor if value is None else value * factor
    return reduce_mean(value)


def ssim(x: ImageLike, x_hat: ImageLike) -> float:
    """Single-scale SSIM (batch mean) as a float."""
    tx, ty = _as_image_batch(x), _as_image_batch(x_hat)
    _check_pair(tx, ty)
    ms_ssim_scales(tx.shape[2], tx.shape[3], 1)
    ssim_term, _ = _ssim_terms(tx, ty)
    return float(ssim_term.data.mean())


def phase1_loss(x: ImageLike, x_hat: ImageLike) -> Tensor:
    """``1 - MS-SSIM``."""
    return 1.0 - ms_ssim(x, x_hat)


# --- ROI terms ---
def roi_l1(x: ImageLike, x_hat: ImageLike, mask: np.ndarray) -> Tensor:
    tx, ty = _as_image_batch(x), _as_image_batch(x_hat)
    _check_pair(tx, ty)
    return _masked_mean(absolute(tx - ty), _mask_array(mask, tx))


def sobel_magnitude(img: ImageLike) -> Tensor:
    """Unnormalized ``sqrt(Gx² + Gy² + eps²) - eps`` with replicate padding."""
    tx = _as_image_batch(img)
    padded = pad_replicate(tx, 1)
    gx = conv2d(padded, _SOBEL_X.reshape(1, 1, 3, 3), _ZERO_BIAS)
    gy = conv2d(padded, _SOBEL_X.T.reshape(1, 1, 3, 3), _ZERO_BIAS)
    eps = SOBEL_EPSILON
    return sqrt(gx * gx + gy * gy + eps * eps) - eps


def sobel_norm_magnitude(img: ImageLike) -> Tensor:
    """Sobel magnitude divided by its per-image maximum (plus eps); in [0, 1]."""
    magnitude = sobel_magnitude(img)
    return magnitude / (reduce_max(magnitude, axis=(1, 2, 3)) + SOBEL_EPSILON)


def roi_edge_loss(x: ImageLike, x_hat: ImageLike, mask: np.ndarray) -> Tensor:
    """Mean ``|M̃(x) - M̃(x_hat)|`` over the ROI."""
    tx, ty = _as_image_batch(x), _as_image_batch(x_hat)
    _check_pair(tx, ty)
    mask_arr = _mask_array(mask, tx)
    target = Tensor(sobel_norm_magnitude(Tensor(tx.data)).data)
    return _masked_mean(absolute(target - sobel_norm_magnitude(ty)), mask_arr)


# --- Phase-2 objective ---
def _weights_mapping(weights: Union["LossWeights", Mapping[str, float]]) -> dict:
    raw = weights.as_dict() if hasattr(weights, "as_dict") else dict(weights)
    values = {term: float(raw.get(term, 0.0)) for term in LOSS_TERMS}
    for term, value in values.items():
        if not np.isfinite(value) or value < 0:
            raise CalibrationError(f"Loss weight {term}={value} must be finite and >= 0")
    if not any(values.values()):
        raise CalibrationError("All Phase-2 loss weights are zero")
    return values


def phase2_components(
    x: ImageLike,
    x_hat: ImageLike,
    mask: np.ndarray,
    terms: Sequence[str] = LOSS_TERMS,
) -> dict[str, Tensor]:
    """Each requested term as its own scalar tensor."""
    builders = {
        TERM_GLOBAL: lambda: phase1_loss(x, x_hat),
        TERM_L1: lambda: roi_l1(x, x_hat, mask),
        TERM_EDGE: lambda: roi_edge_loss(x, x_hat, mask),
    }
    unknown = set(terms) - set(builders)
    if unknown:
        raise CalibrationError(f"Unknown loss terms: {sorted(unknown)}")
    return {term: builders[term]() for term in terms}


def phase2_total(
    x: ImageLike,
    x_hat: ImageLike,
    mask: np.ndarray,
    weights: Union["LossWeights", Mapping[str, float]],
) -> Tensor:
    """``λ_glob·L_glob + λ_L1·L_L1 + λ_edge·L_edge``; zero-weight terms are skipped."""
    values = _weights_mapping(weights)
    active = [term for term in LOSS_TERMS if values[term] > 0]
    components = phase2_components(x, x_hat, mask, active)
    total = None
    for term in active:
        weighted = values[term] * components[term]
        total = weighted if total is None else total + weighted
    return as_tensor(total)
