# roi_cae/plots.py
"""Static PNG figures for probe scores and latent interpolation."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .exceptions import DatasetIOError  # noqa: E402

_LOGGER = logging.getLogger(__name__)

DPI = 120
BINS = 30


def _save(fig: Any, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=DPI, bbox_inches="tight", metadata={"Software": None})
    except OSError as err:
        raise DatasetIOError(
            f"Cannot write plot {path}: {err}", error_details=str(path)
        ) from err
    finally:
        plt.close(fig)
    _LOGGER.debug("Saved plot %s", path)
    return path


def plot_confidence_histograms(
    confidence: Mapping[str, Any], path: Union[str, Path], title: Optional[str] = None
) -> Path:
    """One max-softmax confidence histogram per site, shared bins on [0, 1]."""
    sites = np.asarray(confidence["sites"])
    values = np.asarray(confidence["values"], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    bins = np.linspace(0.0, 1.0, BINS + 1)
    for site in sorted(set(sites.tolist())):
        subset = values[sites == site]
        ax.hist(subset, bins=bins, alpha=0.55, label=f"{site} (n={subset.size})")
    ax.set_xlabel("Max-softmax confidence")
    ax.set_ylabel("Count")
    ax.set_title(title or "Provenance probe confidence")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_ood_distributions(
    scores: Mapping[str, Any], path: Union[str, Path], title: Optional[str] = None
) -> Path:
    """Side-by-side in/out score histograms for Mahalanobis and KNN."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    for ax, key, label in zip(
        axes, ("mahalanobis", "knn"), ("Mahalanobis distance", "Mean KNN distance")
    ):
        inside = np.asarray(scores[key]["in"], dtype=np.float64)
        outside = np.asarray(scores[key]["out"], dtype=np.float64)
        both = np.concatenate([inside, outside])
        bins = np.linspace(both.min(), both.max() + 1e-12, BINS + 1)
        ax.hist(inside, bins=bins, alpha=0.6, density=True, label=f"Seen (n={inside.size})")
        ax.hist(
            outside, bins=bins, alpha=0.6, density=True, label=f"Held out (n={outside.size})"
        )
        ax.set_xlabel(label)
        ax.set_ylabel("Density")
        ax.legend()
        ax.grid(True, alpha=0.3)
    fig.suptitle(title or "OOD score distributions")
    return _save(fig, path)


def plot_pca_scatter(
    pca: Mapping[str, Any], path: Union[str, Path], title: Optional[str] = None
) -> Path:
    """2-D PCA coordinates coloured by site."""
    sites = np.asarray(pca["sites"])
    coords = np.asarray(pca["coords"], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6, 5))
    for site in sorted(set(sites.tolist())):
        subset = coords[sites == site]
        ax.scatter(subset[:, 0], subset[:, 1], s=12, alpha=0.7, label=site)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.set_title(title or "Latent PCA")
    ax.legend()
    ax.grid(True, alpha=0.3)
    return _save(fig, path)


def plot_interpolation_strip(
    frames: np.ndarray, path: Union[str, Path], title: Optional[str] = None
) -> Path:
    """Decoded interpolation frames laid out left to right."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[0] < 2:
        raise DatasetIOError(f"Interpolation strip needs T×H×W frames, got {frames.shape}")
    steps = frames.shape[0]
    height = 1.6 * frames.shape[1] / frames.shape[2] + 0.4
    fig, axes = plt.subplots(1, steps, figsize=(1.6 * steps, height))
    for index, (ax, frame) in enumerate(zip(axes, frames)):
        ax.imshow(frame, cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(f"t={index / (steps - 1):.2f}", fontsize=8)
        ax.axis("off")
    fig.suptitle(title or "Latent interpolation")
    return _save(fig, path)
