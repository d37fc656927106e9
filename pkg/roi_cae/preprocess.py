# roi_cae/preprocess.py
"""Letterbox resizing and ROI remapping between raw and canvas coordinates."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .const import CANVAS_DIVISOR, MIN_ROI_SIDE_PX
from .exceptions import CanvasError, InvalidImageError, InvalidRoiError

_LOGGER = logging.getLogger(__name__)

MIN_RAW_SIDE = 8
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class RoiBox:
    """Axis-aligned box in pixel coordinates (x right, y down)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not np.all(np.isfinite([self.x1, self.y1, self.x2, self.y2])):
            raise InvalidRoiError(f"ROI has non-finite corner: {self.as_list()}")

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> RoiBox:
        if len(values) != 4:
            raise InvalidRoiError(f"ROI needs 4 coordinates, got {list(values)}")
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def clipped(self, width: float, height: float) -> RoiBox:
        return RoiBox(
            float(np.clip(self.x1, 0.0, width)),
            float(np.clip(self.y1, 0.0, height)),
            float(np.clip(self.x2, 0.0, width)),
            float(np.clip(self.y2, 0.0, height)),
        )


@dataclass(frozen=True)
class LetterboxTransform:
    """Affine raw->canvas map ``p' = scale * p + offset``."""

    scale: float
    offset_x: float
    offset_y: float
    canvas_width: int
    canvas_height: int

    @property
    def canvas(self) -> tuple[int, int]:
        return self.canvas_width, self.canvas_height

    def to_canvas(self, x: float, y: float) -> tuple[float, float]:
        return self.scale * x + self.offset_x, self.scale * y + self.offset_y

    def to_raw(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.offset_x) / self.scale, (y - self.offset_y) / self.scale


def check_canvas(canvas: Sequence[int]) -> tuple[int, int]:
    """Return ``(W_t, H_t)`` or raise :class:`CanvasError`."""
    if len(canvas) != 2:
        raise CanvasError(f"Canvas must be (width, height), got {canvas!r}")
    width, height = int(canvas[0]), int(canvas[1])
    if width < CANVAS_DIVISOR or height < CANVAS_DIVISOR:
        raise CanvasError(
            f"Canvas {width}x{height} is smaller than "
            f"{CANVAS_DIVISOR}x{CANVAS_DIVISOR}"
        )
    if width % CANVAS_DIVISOR or height % CANVAS_DIVISOR:
        raise CanvasError(
            f"Canvas {width}x{height} must be divisible by {CANVAS_DIVISOR} "
            "in both dimensions",
            error_details=f"{width}x{height}",
        )
    return width, height


def check_raw_image(img: np.ndarray) -> np.ndarray:
    """Validate a grayscale raw image and return it as float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidImageError(f"Raw image must be 2-D, got shape {arr.shape}")
    height, width = arr.shape
    if width < MIN_RAW_SIDE or height < MIN_RAW_SIDE:
        raise InvalidImageError(
            f"Raw image {width}x{height} is below the {MIN_RAW_SIDE}px minimum"
        )
    if not np.all(np.isfinite(arr)):
        raise InvalidImageError("Raw image contains non-finite intensities")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidImageError(
            f"Raw intensities must lie in [0,1], got [{arr.min():.4g}, {arr.max():.4g}]"
        )
    return arr


def letterbox_transform(
    raw_size: Sequence[int], canvas: Sequence[int]
) -> LetterboxTransform:
    """Scale/offset that fits a ``(W, H)`` raw image centered on the canvas."""
    canvas_w, canvas_h = check_canvas(canvas)
    raw_w, raw_h = int(raw_size[0]), int(raw_size[1])
    if raw_w < 1 or raw_h < 1:
        raise InvalidImageError(f"Degenerate raw size {raw_w}x{raw_h}")
    scale = min(canvas_w / raw_w, canvas_h / raw_h)
    return LetterboxTransform(
        scale=scale,
        offset_x=(canvas_w - scale * raw_w) / 2.0,
        offset_y=(canvas_h - scale * raw_h) / 2.0,
        canvas_width=canvas_w,
        canvas_height=canvas_h,
    )


def letterbox(
    img: np.ndarray, canvas: Sequence[int]
) -> tuple[np.ndarray, LetterboxTransform]:
    """Bilinear aspect-preserving resize onto a zero-padded canvas.

    Pixel centers sit at half-integer positions, so canvas pixel ``u`` samples
    raw position ``(u + 0.5 - offset) / scale - 0.5``.
    """
    raw = check_raw_image(img)
    raw_h, raw_w = raw.shape
    transform = letterbox_transform((raw_w, raw_h), canvas)
    rows = (np.arange(transform.canvas_height) + 0.5 - transform.offset_y)
    rows = rows / transform.scale - 0.5
    cols = (np.arange(transform.canvas_width) + 0.5 - transform.offset_x)
    cols = cols / transform.scale - 0.5
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    out = ndimage.map_coordinates(raw, [grid_r, grid_c], order=1, mode="nearest")
    inside_r = (rows >= -0.5 - _EDGE_TOL) & (rows <= raw_h - 0.5 + _EDGE_TOL)
    inside_c = (cols >= -0.5 - _EDGE_TOL) & (cols <= raw_w - 0.5 + _EDGE_TOL)
    out = np.where(inside_r[:, None] & inside_c[None, :], out, 0.0)
    _LOGGER.debug(
        "Letterboxed %dx%d onto %dx%d (scale %.4f, offset %.2f,%.2f)",
        raw_w,
        raw_h,
        transform.canvas_width,
        transform.canvas_height,
        transform.scale,
        transform.offset_x,
        transform.offset_y,
    )
    return np.clip(out, 0.0, 1.0), transform


def remap_roi(box: RoiBox, transform: LetterboxTransform) -> RoiBox:
    """Map raw corners onto the canvas and clip to its bounds."""
    x1, y1 = transform.to_canvas(box.x1, box.y1)
    x2, y2 = transform.to_canvas(box.x2, box.y2)
    return RoiBox(x1, y1, x2, y2).clipped(
        transform.canvas_width, transform.canvas_height
    )


def invert_roi(box: RoiBox, transform: LetterboxTransform) -> RoiBox:
    """Canvas box back to raw coordinates (exact for boxes that were not clipped)."""
    x1, y1 = transform.to_raw(box.x1, box.y1)
    x2, y2 = transform.to_raw(box.x2, box.y2)
    return RoiBox(x1, y1, x2, y2)


def validate_roi(box: RoiBox, canvas: Sequence[int]) -> bool:
    """False if the clipped box is under 2 px on a side or entirely off-canvas."""
    width, height = int(canvas[0]), int(canvas[1])
    if box.x2 <= 0 or box.y2 <= 0 or box.x1 >= width or box.y1 >= height:
        return False
    clipped = box.clipped(width, height)
    return clipped.width >= MIN_ROI_SIDE_PX and clipped.height >= MIN_ROI_SIDE_PX
