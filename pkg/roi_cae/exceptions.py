# roi_cae/exceptions.py
"""Exceptions raised by the ROI-aware autoencoder package."""

from typing import Optional


class RoiCaeError(Exception):
    """Base error; carries a machine-readable key and optional details."""

    error_key = "roi_cae_error"

    def __init__(
        self,
        message: str,
        error_key: Optional[str] = None,
        error_details: Optional[str] = None,
    ):
        super().__init__(message)
        if error_key is not None:
            self.error_key = error_key
        self.error_details = error_details


class ShapeMismatchError(RoiCaeError):
    """Tensor shapes do not agree for an operation."""

    error_key = "shape_mismatch"


class NonFiniteError(RoiCaeError):
    """A loss, gradient or parameter became NaN or infinite."""

    error_key = "non_finite"


class InvalidImageError(RoiCaeError):
    """Raw image violates size or intensity constraints."""

    error_key = "invalid_image"


class CanvasError(RoiCaeError):
    """Canvas size is not usable by the autoencoder."""

    error_key = "invalid_canvas"


class InvalidRoiError(RoiCaeError):
    """ROI box is degenerate or outside the canvas."""

    error_key = "invalid_roi"


class EmptyMaskError(RoiCaeError):
    """ROI mask covers too few pixels for a localized loss."""

    error_key = "empty_mask"


class DatasetIOError(RoiCaeError):
    """Reading or writing dataset files failed."""

    error_key = "dataset_io"


class SplitError(RoiCaeError):
    """A split could not be planned."""

    error_key = "invalid_split"


class CheckpointError(RoiCaeError):
    """Checkpoint persistence failed."""

    error_key = "checkpoint_error"


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""

    error_key = "checkpoint_version"


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or malformed."""

    error_key = "checkpoint_corrupt"


class CheckpointMismatchError(CheckpointError):
    """Checkpoint config or parameter shapes differ from what was expected."""

    error_key = "checkpoint_mismatch"


class CalibrationError(RoiCaeError):
    """Loss-weight calibration cannot produce usable weights."""

    error_key = "calibration_failed"


class ProbeError(RoiCaeError):
    """A latent probe cannot be fitted or evaluated."""

    error_key = "probe_failed"


class ConfigValidationError(RoiCaeError):
    """Experiment configuration failed schema validation."""

    error_key = "invalid_config"


class LeakageError(RoiCaeError):
    """A held-out sample leaked into a training or validation artifact."""

    error_key = "site_leakage"


class RunFailedError(RoiCaeError):
    """An experiment run failed; wraps the underlying error with context."""

    error_key = "run_failed"
