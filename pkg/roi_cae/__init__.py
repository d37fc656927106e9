# roi_cae/__init__.py
"""Two-phase ROI-aware convolutional autoencoder with multi-site evaluation."""

from .calibration import CalibrationReport, LossWeights, calibrate_weights
from .config import ExperimentConfig, load_config, parse_config
from .const import PACKAGE_VERSION
from .exceptions import RoiCaeError
from .losses import (
    ms_ssim,
    phase1_loss,
    phase2_components,
    phase2_total,
    roi_edge_loss,
    roi_l1,
    roi_mask,
)
from .metrics import MetricRecord, auroc, evaluate_sample, psnr, rank_stats
from .model import (
    CaeConfig,
    Checkpoint,
    ConvAutoencoder,
    desk_config,
    full_config,
    load_checkpoint,
    save_checkpoint,
)
from .phantom import (
    SiteProfile,
    default_site_profiles,
    generate_dataset,
    load_manifest,
    load_samples,
    make_split,
)
from .preprocess import RoiBox, letterbox, remap_roi, validate_roi
from .probes import (
    extract_latents,
    fit_gaussian,
    knn_ood,
    latent_interpolate,
    linear_probe,
    mahalanobis_ood,
    pca_project,
    ridge_qc_probe,
    run_probe_battery,
)
from .report import emit_report
from .services import AblationSpec, ProtocolSpec, run_ablation, run_protocol
from .trainer import TrainConfig, early_stop_update, train_phase

__version__ = PACKAGE_VERSION

__all__ = [
    "AblationSpec",
    "CaeConfig",
    "CalibrationReport",
    "Checkpoint",
    "ConvAutoencoder",
    "ExperimentConfig",
    "LossWeights",
    "MetricRecord",
    "ProtocolSpec",
    "RoiBox",
    "RoiCaeError",
    "SiteProfile",
    "TrainConfig",
    "__version__",
    "auroc",
    "calibrate_weights",
    "default_site_profiles",
    "desk_config",
    "early_stop_update",
    "emit_report",
    "evaluate_sample",
    "extract_latents",
    "fit_gaussian",
    "full_config",
    "generate_dataset",
    "knn_ood",
    "latent_interpolate",
    "letterbox",
    "linear_probe",
    "load_checkpoint",
    "load_config",
    "load_manifest",
    "load_samples",
    "mahalanobis_ood",
    "make_split",
    "ms_ssim",
    "parse_config",
    "pca_project",
    "phase1_loss",
    "phase2_components",
    "phase2_total",
    "psnr",
    "rank_stats",
    "remap_roi",
    "ridge_qc_probe",
    "roi_edge_loss",
    "roi_l1",
    "roi_mask",
    "run_ablation",
    "run_probe_battery",
    "run_protocol",
    "save_checkpoint",
    "train_phase",
    "validate_roi",
]
