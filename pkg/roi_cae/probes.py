# roi_cae/probes.py
"""Frozen-latent probes: provenance, OOD scoring, QC regression, PCA, interpolation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.spatial.distance import cdist
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression, Ridge
from sklearn.pipeline import Pipeline, make_pipeline
from sklearn.preprocessing import StandardScaler

from .const import (
    COVARIANCE_TAU_SCALE,
    KNN_K,
    PCA_DIMS,
    PROBE_EPOCHS,
    PROBE_LR,
    PROBE_WEIGHT_DECAY,
    QC_SUITABILITY_THRESHOLD,
    RIDGE_ALPHA,
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VAL,
)
from .exceptions import DatasetIOError, InvalidRoiError, ProbeError, ShapeMismatchError
from .losses import roi_edge_loss, roi_l1, roi_mask
from .metrics import auroc, rank_stats, softmax_stats
from .model import Checkpoint, ConvAutoencoder, as_batch, roi_pool_features
from .optim import AdamState, adam_step
from .phantom import Sample
from .preprocess import validate_roi
from .tensor import Rng, Tensor, affine, backward, cross_entropy, parameter

_LOGGER = logging.getLogger(__name__)


@dataclass
class LatentRecord:
    id: str
    site: str
    split: str
    z: np.ndarray
    z_roi: np.ndarray
    r_roi: float
    e_roi: float
    z_norm: float
    degradation: float = 0.0


# --- Extraction ---
def reconstruct_sample(model: ConvAutoencoder, image: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(x_hat H×W, z_map C×h×w, z)`` for one image through a frozen model."""
    params = model.tensors(requires_grad=False)
    x_hat, z_map, z = model.forward(Tensor(as_batch(image, model.config)), params)
    return x_hat.data[0, 0], z_map.data[0], z.data[0]


def extract_latents(
    checkpoint: Union[Checkpoint, ConvAutoencoder],
    samples: Sequence[Sample],
    splits: Optional[Mapping[str, str]] = None,
) -> list[LatentRecord]:
    """One record per sample from the frozen encoder and its own reconstruction."""
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    canvas = model.config.canvas
    records = []
    for sample in samples:
        if not validate_roi(sample.roi, canvas):
            raise InvalidRoiError(
                f"Sample {sample.sample_id} has an invalid ROI {sample.roi.as_list()}",
                error_details=sample.sample_id,
            )
        x_hat, z_map, z = reconstruct_sample(model, sample.image)
        mask = roi_mask(sample.roi, canvas)
        records.append(
            LatentRecord(
                id=sample.sample_id,
                site=sample.site,
                split=(splits or {}).get(sample.sample_id, ""),
                z=z,
                z_roi=roi_pool_features(z_map, sample.roi),
                r_roi=roi_l1(sample.image, x_hat, mask).item(),
                e_roi=roi_edge_loss(sample.image, x_hat, mask).item(),
                z_norm=float(np.linalg.norm(z)),
                degradation=sample.degradation,
            )
        )
    _LOGGER.debug("Extracted %d latent records", len(records))
    return records


def _matrix(records: Sequence[LatentRecord]) -> np.ndarray:
    if not records:
        raise ProbeError("No latent records supplied")
    return np.stack([record.z for record in records])


# --- Persistence ---
def save_latents_csv(records: Sequence[LatentRecord], path: Union[str, Path]) -> Path:
    """id, site, split, z_*, zroi_*, r_roi, e_roi, z_norm, degradation."""
    path = Path(path)
    if not records:
        raise ProbeError("Refusing to write an empty latent table")
    z_cols = [f"z_{i}" for i in range(records[0].z.size)]
    roi_cols = [f"zroi_{i}" for i in range(records[0].z_roi.size)]
    rows = []
    for record in records:
        row: dict[str, Any] = {"id": record.id, "site": record.site, "split": record.split}
        row.update(zip(z_cols, record.z.tolist()))
        row.update(zip(roi_cols, record.z_roi.tolist()))
        row.update(
            r_roi=record.r_roi,
            e_roi=record.e_roi,
            z_norm=record.z_norm,
            degradation=record.degradation,
        )
        rows.append(row)
    columns = ["id", "site", "split", *z_cols, *roi_cols, "r_roi", "e_roi", "z_norm", "degradation"]
    try:
        pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format="%.17g")
    except OSError as err:
        raise DatasetIOError(
            f"Cannot write latents {path}: {err}", error_details=str(path)
        ) from err
    return path


def load_latents_csv(path: Union[str, Path]) -> list[LatentRecord]:
    path = Path(path)
    try:
        frame = pd.read_csv(
            path,
            dtype={"id": str, "site": str, "split": str},
            keep_default_na=False,
            float_precision="round_trip",
        )
    except (OSError, pd.errors.ParserError) as err:
        raise DatasetIOError(
            f"Cannot read latents {path}: {err}", error_details=str(path)
        ) from err
    z_cols = [col for col in frame.columns if col.startswith("z_") and col[2:].isdigit()]
    roi_cols = [col for col in frame.columns if col.startswith("zroi_")]
    z_values = frame[z_cols].to_numpy(dtype=np.float64)
    roi_values = frame[roi_cols].to_numpy(dtype=np.float64)
    return [
        LatentRecord(
            id=row["id"],
            site=row["site"],
            split=row["split"],
            z=z_values[index].copy(),
            z_roi=roi_values[index].copy(),
            r_roi=float(row["r_roi"]),
            e_roi=float(row["e_roi"]),
            z_norm=float(row["z_norm"]),
            degradation=float(row.get("degradation", 0.0)),
        )
        for index, row in enumerate(frame.to_dict("records"))
    ]


# --- OOD scorers ---
@dataclass
class GaussianFit:
    """Mean and regularized covariance with its Cholesky factor."""

    mean: np.ndarray
    cov: np.ndarray
    tau: float
    factor: tuple[np.ndarray, bool]

    @classmethod
    def from_moments(cls, mean: np.ndarray, cov: np.ndarray, tau: float = 0.0) -> GaussianFit:
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if cov.shape != (mean.size, mean.size):
            raise ShapeMismatchError(f"Covariance {cov.shape} does not match mean {mean.shape}")
        try:
            factor = linalg.cho_factor(cov + tau * np.eye(mean.size), lower=True)
        except linalg.LinAlgError as err:
            raise ProbeError(
                f"Covariance is not positive definite even with tau={tau:g}"
            ) from err
        return cls(mean, cov, tau, factor)


def fit_gaussian(latents: np.ndarray, tau: Optional[float] = None) -> GaussianFit:
    """Pooled fit; ``tau`` defaults to 1e-6 · trace(Σ) / dim."""
    data = np.asarray(latents, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ProbeError(f"Gaussian fit needs at least 2 latent rows, got {data.shape}")
    cov = np.cov(data, rowvar=False)
    if tau is None:
        tau = COVARIANCE_TAU_SCALE * float(np.trace(cov)) / data.shape[1]
    return GaussianFit.from_moments(data.mean(axis=0), cov, tau)


def mahalanobis_ood(fit: GaussianFit, z: np.ndarray) -> Union[float, np.ndarray]:
    """``sqrt((z-μ)ᵀ(Σ+τI)⁻¹(z-μ))`` for one latent or a row stack."""
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 1
    diff = np.atleast_2d(arr) - fit.mean
    solved = linalg.cho_solve(fit.factor, diff.T)
    scores = np.sqrt(np.maximum(np.sum(diff.T * solved, axis=0), 0.0))
    return float(scores[0]) if single else scores


def knn_ood(train_z: np.ndarray, z: np.ndarray, k: int = KNN_K) -> Union[float, np.ndarray]:
    """Mean Euclidean distance to the ``k`` nearest reference latents."""
    reference = np.asarray(train_z, dtype=np.float64)
    if reference.shape[0] < k:
        raise ProbeError(
            f"KNN k={k} exceeds the {reference.shape[0]} reference latents",
            error_details=f"k={k}, n_train={reference.shape[0]}",
        )
    arr = np.asarray(z, dtype=np.float64)
    single = arr.ndim == 1
    distances = cdist(np.atleast_2d(arr), reference)
    scores = np.sort(distances, axis=1)[:, :k].mean(axis=1)
    return float(scores[0]) if single else scores


# --- Provenance probe ---
@dataclass
class SiteConfidence:
    site: str
    seen: bool
    n: int
    confidence_mean: float
    confidence_std: float
    entropy_mean: float
    entropy_std: float


@dataclass
class LinearProbeResult:
    classes: list[str]
    seen_accuracy: float
    per_site: list[SiteConfidence]
    confidence: np.ndarray
    entropy: np.ndarray
    unseen_auroc: Optional[float] = None


def linear_probe(
    train: Sequence[LatentRecord],
    eval_records: Sequence[LatentRecord],
    seed: int,
    epochs: int = PROBE_EPOCHS,
    lr: float = PROBE_LR,
    weight_decay: float = PROBE_WEIGHT_DECAY,
) -> LinearProbeResult:
    """Softmax regression on z over the seen sites; unseen sites are only scored."""
    classes = sorted({record.site for record in train})
    if len(classes) < 2:
        raise ProbeError(f"Linear probe needs >= 2 seen sites, got {classes}")
    x_train = _matrix(train)
    labels = np.array([classes.index(record.site) for record in train])
    dim = x_train.shape[1]
    init = Rng(seed).stream("probe")
    bound = 1.0 / np.sqrt(dim)
    params = {
        "weight": init.uniform(-bound, bound, size=(len(classes), dim)),
        "bias": np.zeros(len(classes)),
    }
    state = AdamState(lr=lr, weight_decay=weight_decay)
    for _ in range(epochs):
        tensors = {name: parameter(block, name) for name, block in params.items()}
        loss = cross_entropy(affine(Tensor(x_train), tensors["weight"], tensors["bias"]), labels)
        params, state = adam_step(params, backward(loss, tensors), state)

    x_eval = _matrix(eval_records)
    logits = x_eval @ params["weight"].T + params["bias"]
    confidence, entropy = softmax_stats(logits)
    predicted = logits.argmax(axis=1)
    seen_mask = np.array([record.site in classes for record in eval_records])
    if seen_mask.any():
        truth = np.array(
            [classes.index(r.site) for r, seen in zip(eval_records, seen_mask) if seen]
        )
        seen_accuracy = float(np.mean(predicted[seen_mask] == truth))
    else:
        seen_accuracy = float("nan")

    per_site = []
    for site in sorted({record.site for record in eval_records}):
        idx = np.array([record.site == site for record in eval_records])
        per_site.append(
            SiteConfidence(
                site=site,
                seen=site in classes,
                n=int(idx.sum()),
                confidence_mean=float(confidence[idx].mean()),
                confidence_std=float(confidence[idx].std()),
                entropy_mean=float(entropy[idx].mean()),
                entropy_std=float(entropy[idx].std()),
            )
        )
    unseen_auroc = None
    if seen_mask.any() and not seen_mask.all():
        unseen_auroc = auroc(-confidence[~seen_mask], -confidence[seen_mask])
    _LOGGER.info(
        "Linear probe over %s: seen accuracy %.3f, unseen AUROC %s",
        classes,
        seen_accuracy,
        "n/a" if unseen_auroc is None else f"{unseen_auroc:.3f}",
    )
    return LinearProbeResult(classes, seen_accuracy, per_site, confidence, entropy, unseen_auroc)


# --- QC probes ---
def qc_feature_vector(record: LatentRecord) -> np.ndarray:
    """``q(x) = [r_roi, e_roi, ‖z‖₂]``."""
    return np.array([record.r_roi, record.e_roi, record.z_norm], dtype=np.float64)


def fit_ridge(x: np.ndarray, y: np.ndarray, alpha: float = RIDGE_ALPHA) -> Pipeline:
    """Standardize on the training rows, then closed-form ridge."""
    return make_pipeline(StandardScaler(), Ridge(alpha=alpha, solver="cholesky")).fit(x, y)


def ridge_qc_probe(
    train: Sequence[LatentRecord],
    eval_records: Sequence[LatentRecord],
    alpha: float = RIDGE_ALPHA,
) -> dict[str, dict[str, float]]:
    """Regress e_roi from z; ``{site: {r2, rho, n}}`` over the evaluation sites."""
    x_train = _matrix(train)
    if len(train) <= x_train.shape[1] / 4:
        _LOGGER.warning(
            "Ridge QC probe trains on %d rows for %d features", len(train), x_train.shape[1]
        )
    pipeline = fit_ridge(x_train, np.array([record.e_roi for record in train]), alpha)
    results: dict[str, dict[str, float]] = {}
    for site in sorted({record.site for record in eval_records}):
        rows = [record for record in eval_records if record.site == site]
        predicted = pipeline.predict(_matrix(rows))
        try:
            r2, rho = rank_stats([record.e_roi for record in rows], predicted)
        except ProbeError as err:
            _LOGGER.warning("QC probe skipped site '%s': %s", site, err)
            continue
        results[site] = {"r2": r2, "rho": rho, "n": float(len(rows))}
    return results


def qc_triage_demo(
    train: Sequence[LatentRecord],
    eval_records: Sequence[LatentRecord],
    threshold: float = QC_SUITABILITY_THRESHOLD,
) -> Optional[float]:
    """AUROC of a logistic classifier on q(x) flagging degraded samples.

    Labels come from the generator's degradation level; returns None when a
    split lacks one of the two classes.
    """
    y_train = np.array([record.degradation >= threshold for record in train], dtype=int)
    y_eval = np.array([record.degradation >= threshold for record in eval_records], dtype=int)
    if len(set(y_train)) < 2 or len(set(y_eval)) < 2:
        _LOGGER.warning("QC triage demo needs both suitability classes; skipped")
        return None
    q_train = np.stack([qc_feature_vector(record) for record in train])
    q_eval = np.stack([qc_feature_vector(record) for record in eval_records])
    classifier = make_pipeline(StandardScaler(), LogisticRegression()).fit(q_train, y_train)
    scores = classifier.predict_proba(q_eval)[:, 1]
    return auroc(scores[y_eval == 1], scores[y_eval == 0])


# --- Projection and interpolation ---
def pca_project(latents: np.ndarray, dims: int = PCA_DIMS) -> tuple[np.ndarray, np.ndarray]:
    """Coordinates on the top ``dims`` components and their explained-variance ratios."""
    data = np.asarray(latents, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < dims + 1:
        raise ProbeError(f"PCA to {dims} dims needs at least {dims + 1} rows, got {data.shape}")
    if np.allclose(data, data[0]):
        raise ProbeError("All latents are identical; PCA is undefined")
    pca = PCA(n_components=dims, svd_solver="full")
    coords = pca.fit_transform(data)
    return coords, pca.explained_variance_ratio_


def latent_interpolate(
    checkpoint: Union[Checkpoint, ConvAutoencoder],
    z_a: np.ndarray,
    z_b: np.ndarray,
    steps: int,
) -> np.ndarray:
    """Decode ``(1-t)·z_a + t·z_b`` for ``steps`` evenly spaced t in [0, 1]."""
    if steps < 2:
        raise ProbeError(f"Interpolation needs at least 2 steps, got {steps}")
    model = checkpoint.model() if isinstance(checkpoint, Checkpoint) else checkpoint
    z_a = np.asarray(z_a, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    frames = [
        model.decode_latent((1.0 - t) * z_a + t * z_b)
        for t in np.linspace(0.0, 1.0, steps)
    ]
    return np.stack(frames)


# --- Battery ---
@dataclass
class ProbeReport:
    phase: str
    held_out_site: str
    provenance: dict[str, Any]
    ood: dict[str, float]
    qc: dict[str, dict[str, float]]
    triage_auroc: Optional[float]
    pca_variance: list[float]
    scores: dict[str, Any] = field(default_factory=dict)

    def as_dict(self, include_scores: bool = False) -> dict[str, Any]:
        payload = {
            "phase": self.phase,
            "held_out_site": self.held_out_site,
            "provenance": self.provenance,
            "ood": self.ood,
            "qc": self.qc,
            "triage_auroc": self.triage_auroc,
            "pca_variance": self.pca_variance,
        }
        if include_scores:
            payload["scores"] = self.scores
        return payload


def split_records(
    records: Iterable[LatentRecord],
) -> tuple[list[LatentRecord], list[LatentRecord], list[LatentRecord]]:
    records = list(records)
    return (
        [r for r in records if r.split == SPLIT_TRAIN],
        [r for r in records if r.split == SPLIT_VAL],
        [r for r in records if r.split == SPLIT_TEST],
    )


def run_probe_battery(
    records: Sequence[LatentRecord],
    held_out_site: str,
    seed: int,
    phase: str,
    knn_k: int = KNN_K,
) -> ProbeReport:
    """Every probe over stored records; the Gaussian/KNN references and all
    trained probes use only the train split."""
    train, val, test = split_records(records)
    if not train or not val or not test:
        raise ProbeError(
            f"Probe battery needs train/val/test records, got "
            f"{len(train)}/{len(val)}/{len(test)}"
        )
    if knn_k > len(train):
        raise ProbeError(
            f"KNN k={knn_k} exceeds the {len(train)} training latents",
            error_details=f"k={knn_k}, n_train={len(train)}",
        )
    evaluated = val + test
    provenance = linear_probe(train, evaluated, seed)

    train_z = _matrix(train)
    fit = fit_gaussian(train_z)
    maha_neg = mahalanobis_ood(fit, _matrix(val))
    maha_pos = mahalanobis_ood(fit, _matrix(test))
    knn_neg = knn_ood(train_z, _matrix(val), knn_k)
    knn_pos = knn_ood(train_z, _matrix(test), knn_k)
    ood = {
        "mahalanobis_auroc": auroc(maha_pos, maha_neg),
        "knn_auroc": auroc(knn_pos, knn_neg),
        "knn_k": float(knn_k),
        "tau": fit.tau,
    }
    coords, ratios = pca_project(_matrix(records))
    report = ProbeReport(
        phase=phase,
        held_out_site=held_out_site,
        provenance={
            "classes": provenance.classes,
            "seen_accuracy": provenance.seen_accuracy,
            "unseen_auroc": provenance.unseen_auroc,
            "per_site": [vars(row) for row in provenance.per_site],
        },
        ood=ood,
        qc=ridge_qc_probe(train, evaluated),
        triage_auroc=qc_triage_demo(train, evaluated),
        pca_variance=[float(v) for v in ratios],
        scores={
            "confidence": {
                "sites": [r.site for r in evaluated],
                "values": provenance.confidence.tolist(),
            },
            "mahalanobis": {"in": maha_neg.tolist(), "out": maha_pos.tolist()},
            "knn": {"in": knn_neg.tolist(), "out": knn_pos.tolist()},
            "pca": {"sites": [r.site for r in records], "coords": coords.tolist()},
        },
    )
    _LOGGER.info(
        "%s probes (held out %s): Mahalanobis AUROC %.4f, KNN AUROC %.4f",
        phase,
        held_out_site,
        ood["mahalanobis_auroc"],
        ood["knn_auroc"],
    )
    return report
