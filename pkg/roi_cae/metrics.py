# roi_cae/metrics.py
"""Evaluation metrics: per-sample reconstruction records, AUROC, rank statistics."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
import pandas as pd
from scipy import special, stats
from sklearn.metrics import r2_score

from .const import METRIC_COLUMNS, PSNR_CAP_DB, ROI_SSIM_MIN_CROP
from .exceptions import DatasetIOError, ProbeError, ShapeMismatchError
from .losses import ms_ssim, roi_edge_loss, roi_l1, roi_mask, ssim
from .preprocess import RoiBox

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricRecord:
    id: str
    site: str
    split: str
    psnr: float
    ms_ssim: float
    roi_mae: float
    roi_ms_ssim: float
    roi_edge_mae: float

    def as_row(self) -> dict[str, Union[str, float]]:
        return asdict(self)


def psnr(x: np.ndarray, x_hat: np.ndarray) -> float:
    """``10·log10(1/MSE)`` for unit-range images, capped at 100 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatchError(f"psnr: shapes {x.shape} and {x_hat.shape} differ")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def roi_crop_bounds(
    box: RoiBox, height: int, width: int, min_side: int = ROI_SSIM_MIN_CROP
) -> tuple[int, int, int, int]:
    """Integer crop ``(r0, r1, c0, c1)`` covering the box, grown to ``min_side``."""

    def _span(lo: float, hi: float, limit: int) -> tuple[int, int]:
        start = int(max(math.floor(lo), 0))
        stop = int(min(math.ceil(hi), limit))
        side = min(min_side, limit)
        while stop - start < side:
            if start > 0:
                start -= 1
            if stop - start < side and stop < limit:
                stop += 1
        return start, stop

    r0, r1 = _span(box.y1, box.y2, height)
    c0, c1 = _span(box.x1, box.x2, width)
    return r0, r1, c0, c1


def roi_ssim(x: np.ndarray, x_hat: np.ndarray, box: RoiBox) -> float:
    """Single-scale SSIM on the ROI crop expanded to at least 16×16."""
    r0, r1, c0, c1 = roi_crop_bounds(box, x.shape[0], x.shape[1])
    return ssim(x[r0:r1, c0:c1], x_hat[r0:r1, c0:c1])


def evaluate_sample(
    x: np.ndarray,
    x_hat: np.ndarray,
    roi: RoiBox,
    sample_id: str = "",
    site: str = "",
    split: str = "",
) -> MetricRecord:
    """All five reconstruction metrics for one H×W image pair."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.ndim != 2 or x.shape != x_hat.shape:
        raise ShapeMismatchError(
            f"evaluate_sample expects two equal H×W images, got {x.shape}, {x_hat.shape}"
        )
    height, width = x.shape
    mask = roi_mask(roi, (width, height))
    return MetricRecord(
        id=sample_id,
        site=site,
        split=split,
        psnr=psnr(x, x_hat),
        ms_ssim=ms_ssim(x, x_hat).item(),
        roi_mae=roi_l1(x, x_hat, mask).item(),
        roi_ms_ssim=roi_ssim(x, x_hat, roi),
        roi_edge_mae=roi_edge_loss(x, x_hat, mask).item(),
    )


def records_frame(records: Iterable[MetricRecord]) -> pd.DataFrame:
    return pd.DataFrame([record.as_row() for record in records], columns=list(METRIC_COLUMNS))


def save_metrics_csv(records: Iterable[MetricRecord], path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        records_frame(records).to_csv(path, index=False, float_format="%.10g")
    except OSError as err:
        raise DatasetIOError(
            f"Cannot write metrics {path}: {err}", error_details=str(path)
        ) from err
    return path


def load_metrics_csv(path: Union[str, Path]) -> list[MetricRecord]:
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype={"id": str, "site": str, "split": str})
    except (OSError, pd.errors.ParserError) as err:
        raise DatasetIOError(
            f"Cannot read metrics {path}: {err}", error_details=str(path)
        ) from err
    missing = set(METRIC_COLUMNS) - set(frame.columns)
    if missing:
        raise DatasetIOError(f"{path} lacks columns {sorted(missing)}")
    return [MetricRecord(**row) for row in frame[list(METRIC_COLUMNS)].to_dict("records")]


# --- Scoring statistics ---
def auroc(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float:
    """Probability a positive outranks a negative; ties count one half."""
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ProbeError(
            f"AUROC needs both classes (got {pos.size} positives, {neg.size} negatives)"
        )
    result = stats.mannwhitneyu(pos, neg, alternative="two-sided", method="asymptotic")
    return float(result.statistic) / float(pos.size * neg.size)


def rank_stats(y_true: Sequence[float], y_pred: Sequence[float]) -> tuple[float, float]:
    """``(R², Spearman ρ)``; a constant prediction gives ρ = 0."""
    truth = np.asarray(y_true, dtype=np.float64).ravel()
    pred = np.asarray(y_pred, dtype=np.float64).ravel()
    if truth.shape != pred.shape:
        raise ShapeMismatchError(f"rank_stats: {truth.shape} vs {pred.shape}")
    if truth.size < 3:
        raise ProbeError(f"rank_stats needs at least 3 points, got {truth.size}")
    if np.ptp(truth) == 0:
        raise ProbeError("rank_stats: target is constant, R² is undefined")
    r2 = float(r2_score(truth, pred))
    if np.ptp(pred) == 0:
        _LOGGER.warning("Constant prediction; Spearman rho reported as 0")
        return r2, 0.0
    rho, _ = stats.spearmanr(truth, pred)
    return r2, float(rho)


def softmax_stats(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Max softmax probability and entropy (nats) per row of logits."""
    arr = np.asarray(logits, dtype=np.float64)
    if arr.shape[-1] < 2:
        raise ShapeMismatchError("softmax_stats needs at least 2 classes")
    probs = special.softmax(arr, axis=-1)
    return probs.max(axis=-1), stats.entropy(probs, axis=-1)
