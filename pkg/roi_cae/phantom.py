# roi_cae/phantom.py
"""Synthetic multi-site NT phantoms, dataset manifests and site-held-out splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from .const import (
    DEFAULT_CANVAS,
    FILE_MANIFEST,
    MIN_PER_SITE,
    ROI_MARGIN_PX,
    VALIDATION_FRACTION,
)
from .exceptions import ConfigValidationError, DatasetIOError, SplitError
from .preprocess import RoiBox, letterbox, remap_roi, validate_roi
from .tensor import Rng

_LOGGER = logging.getLogger(__name__)

IMAGES_DIR = "images"
MAX_RENDER_ATTEMPTS = 10
MIN_BAND_THICKNESS = 3.0
MIN_MEMBRANE_CONTRAST = 0.2


@dataclass(frozen=True)
class SiteProfile:
    """Acquisition style of one site."""

    site_id: str
    gain: float
    gamma: float
    speckle_sigma: float
    speckle_corr_len: float = 1.5
    vignette: float = 0.0
    fov_inset: float = 0.0
    raw_size: tuple[int, int] = (200, 140)

    def __post_init__(self) -> None:
        if not self.site_id:
            raise ConfigValidationError("Site profile needs a site_id")
        if self.gain <= 0 or self.gamma <= 0:
            raise ConfigValidationError(
                f"Site '{self.site_id}': gain and gamma must be positive"
            )
        if self.speckle_sigma < 0 or self.speckle_corr_len < 0:
            raise ConfigValidationError(
                f"Site '{self.site_id}': speckle sigma/correlation must be >= 0"
            )
        if not 0.0 <= self.fov_inset <= 0.3:
            raise ConfigValidationError(
                f"Site '{self.site_id}': fov_inset {self.fov_inset} not in [0, 0.3]"
            )
        if not 0.0 <= self.vignette < 1.0:
            raise ConfigValidationError(
                f"Site '{self.site_id}': vignette {self.vignette} not in [0, 1)"
            )


def default_site_profiles() -> list[SiteProfile]:
    """Two near sites (a, b) and one far site (c)."""
    return [
        SiteProfile("site_a", 1.0, 1.0, 0.15, 1.5, 0.10, 0.00, (200, 140)),
        SiteProfile("site_b", 0.9, 1.05, 0.20, 1.5, 0.15, 0.05, (192, 136)),
        SiteProfile("site_c", 0.6, 1.3, 0.35, 3.0, 0.35, 0.15, (240, 150)),
    ]


@dataclass(frozen=True)
class PhantomParams:
    """Geometry and echo levels of one phantom, in raw pixel units."""

    raw_width: int
    raw_height: int
    head_center: tuple[float, float]
    head_axes: tuple[float, float]
    head_intensity: float
    background: float
    texture_sigma: float
    band_center: tuple[float, float]
    band_length: float
    band_thickness: float
    band_angle: float
    band_interior: float
    membrane_intensity: float
    membrane_width: float
    degradation: float = 0.0

    def __post_init__(self) -> None:
        if self.band_thickness < MIN_BAND_THICKNESS:
            raise ConfigValidationError(
                f"NT band thickness {self.band_thickness} below {MIN_BAND_THICKNESS}px"
            )
        if self.membrane_intensity < self.band_interior + MIN_MEMBRANE_CONTRAST:
            raise ConfigValidationError(
                "Membranes must be at least 0.2 brighter than the band interior"
            )
        if not 0.0 <= self.degradation <= 1.0:
            raise ConfigValidationError(
                f"Degradation {self.degradation} not in [0, 1]"
            )


@dataclass
class Sample:
    image: np.ndarray
    roi: RoiBox
    site: str
    sample_id: str
    degradation: float = 0.0


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    site: str
    path: str
    roi: tuple[float, float, float, float]
    width: int
    height: int
    degradation: float = 0.0

    def to_json(self) -> str:
        payload = asdict(self)
        payload["roi"] = list(self.roi)
        return json.dumps(payload, sort_keys=True)


@dataclass
class Manifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def ids(self) -> list[str]:
        return [entry.id for entry in self.entries]

    @property
    def sites(self) -> list[str]:
        return sorted({entry.site for entry in self.entries})

    @property
    def canvas(self) -> tuple[int, int]:
        if not self.entries:
            return DEFAULT_CANVAS
        return self.entries[0].width, self.entries[0].height

    def by_site(self, site: str) -> list[ManifestEntry]:
        return [entry for entry in self.entries if entry.site == site]

    def entry(self, sample_id: str) -> ManifestEntry:
        for entry in self.entries:
            if entry.id == sample_id:
                return entry
        raise DatasetIOError(f"Sample id '{sample_id}' not in manifest {self.root}")


@dataclass(frozen=True)
class SplitPlan:
    held_out_site: str
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def split_of(self, sample_id: str) -> Optional[str]:
        if sample_id in self.train_ids:
            return "train"
        if sample_id in self.val_ids:
            return "val"
        if sample_id in self.test_ids:
            return "test"
        return None


# --- Rendering ---
def sample_phantom_params(
    rng: np.random.Generator, raw_size: Sequence[int], degradation: float = 0.0
) -> PhantomParams:
    """Draw plausible phantom geometry; the band sits in the central image area."""
    width, height = int(raw_size[0]), int(raw_size[1])
    short = min(width, height)
    thickness = max(MIN_BAND_THICKNESS, rng.uniform(0.03, 0.05) * short)
    interior = rng.uniform(0.04, 0.12)
    return PhantomParams(
        raw_width=width,
        raw_height=height,
        head_center=(
            rng.uniform(0.4, 0.6) * width,
            rng.uniform(0.35, 0.5) * height,
        ),
        head_axes=(rng.uniform(0.25, 0.35) * width, rng.uniform(0.22, 0.3) * height),
        head_intensity=rng.uniform(0.45, 0.6),
        background=rng.uniform(0.15, 0.25),
        texture_sigma=0.03,
        band_center=(
            rng.uniform(0.4, 0.6) * width,
            rng.uniform(0.45, 0.65) * height,
        ),
        band_length=rng.uniform(0.18, 0.25) * width,
        band_thickness=thickness,
        band_angle=rng.uniform(-0.3, 0.3),
        band_interior=interior,
        membrane_intensity=rng.uniform(0.85, 0.95),
        membrane_width=max(1.5, 0.4 * thickness),
        degradation=float(degradation),
    )


def render_phantom(
    params: PhantomParams, rng: np.random.Generator
) -> tuple[np.ndarray, RoiBox]:
    """Head ellipse, a dark NT band between two bright membranes, and a textured
    background. The returned box bounds the band tightly plus a 4 px margin."""
    height, width = params.raw_height, params.raw_width
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5

    texture = ndimage.gaussian_filter(rng.standard_normal((height, width)), 2.0)
    texture *= params.texture_sigma / max(float(texture.std()), 1e-12)
    img = np.full((height, width), params.background) + texture

    hx, hy = params.head_center
    ax, ay = params.head_axes
    head = ((xx - hx) / ax) ** 2 + ((yy - hy) / ay) ** 2 <= 1.0
    img[head] = params.head_intensity + texture[head]

    cos_a, sin_a = math.cos(params.band_angle), math.sin(params.band_angle)
    bx, by = params.band_center
    along = (xx - bx) * cos_a + (yy - by) * sin_a
    across = -(xx - bx) * sin_a + (yy - by) * cos_a
    half_t = params.band_thickness / 2.0
    on_band = np.abs(along) <= params.band_length / 2.0
    interior = on_band & (np.abs(across) < half_t)
    membranes = (
        on_band
        & (np.abs(across) >= half_t)
        & (np.abs(across) < half_t + params.membrane_width)
    )
    contrast = 1.0 - 0.5 * params.degradation
    membrane_level = params.band_interior + contrast * (
        params.membrane_intensity - params.band_interior
    )
    img[interior] = params.band_interior
    img[membranes] = membrane_level

    footprint = interior | membranes
    if params.degradation > 0:
        img = _degrade_band(img, footprint, params, rng)

    rows, cols = np.nonzero(footprint)
    box = RoiBox(
        float(max(cols.min() - ROI_MARGIN_PX, 0.0)),
        float(max(rows.min() - ROI_MARGIN_PX, 0.0)),
        float(min(cols.max() + 1 + ROI_MARGIN_PX, width)),
        float(min(rows.max() + 1 + ROI_MARGIN_PX, height)),
    )
    return np.clip(img, 0.0, 1.0), box


def _degrade_band(
    img: np.ndarray,
    footprint: np.ndarray,
    params: PhantomParams,
    rng: np.random.Generator,
) -> np.ndarray:
    """Blur the band and scatter echo clutter over it, scaled by degradation."""
    level = params.degradation
    near = ndimage.binary_dilation(footprint, iterations=3)
    blurred = ndimage.gaussian_filter(img, 1.5 * level)
    out = np.where(near, blurred, img)
    rows, cols = np.nonzero(footprint)
    count = int(round(6 * level))
    clutter = np.zeros_like(img)
    for _ in range(count):
        pick = rng.integers(len(rows))
        clutter[rows[pick], cols[pick]] += 1.0
    if count:
        clutter = ndimage.gaussian_filter(clutter, 1.2)
        clutter *= 0.5 * level / max(float(clutter.max()), 1e-12)
        out = out + clutter
    return out


def apply_site_style(
    img: np.ndarray, profile: SiteProfile, rng: np.random.Generator
) -> np.ndarray:
    """``clip(gain * I**gamma * (1 + sigma*n))`` with correlated unit-variance
    noise ``n``, then vignette and field-of-view inset."""
    img = np.asarray(img, dtype=np.float64)
    styled = profile.gain * np.power(img, profile.gamma)
    if profile.speckle_sigma > 0:
        noise = rng.standard_normal(img.shape)
        if profile.speckle_corr_len > 0:
            noise = ndimage.gaussian_filter(noise, profile.speckle_corr_len)
        noise = noise - noise.mean()
        noise /= max(float(noise.std()), 1e-12)
        styled = styled * (1.0 + profile.speckle_sigma * noise)
    height, width = img.shape
    if profile.vignette > 0:
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
        radius = np.hypot(
            (xx - width / 2) / (width / 2), (yy - height / 2) / (height / 2)
        ) / math.sqrt(2.0)
        styled = styled * (1.0 - profile.vignette * radius**2)
    if profile.fov_inset > 0:
        side = int(round(profile.fov_inset * width))
        top = int(round(profile.fov_inset * height))
        styled = styled.copy()
        styled[:top, :] = 0.0
        styled[:, :side] = 0.0
        styled[:, width - side :] = 0.0
    return np.clip(styled, 0.0, 1.0)


# --- Dataset files ---
def _write_pgm(path: Path, image: np.ndarray) -> None:
    pixels = np.round(255.0 * np.clip(image, 0.0, 1.0)).astype(np.uint8)
    try:
        Image.fromarray(pixels).save(path, format="PPM")
    except OSError as err:
        raise DatasetIOError(
            f"Cannot write image {path}: {err}", error_details=str(path)
        ) from err


def _read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as handle:
            pixels = np.asarray(handle.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as err:
        raise DatasetIOError(
            f"Cannot read image {path}: {err}", error_details=str(path)
        ) from err
    return pixels / 255.0


def render_sample(
    profile: SiteProfile, canvas: Sequence[int], seed: int, sample_id: str
) -> Sample:
    """Render one styled, letterboxed sample from its own sub-stream."""
    rng = Rng(seed).stream(f"sample/{sample_id}")
    for attempt in range(1, MAX_RENDER_ATTEMPTS + 1):
        degradation = float(rng.uniform(0.0, 1.0))
        params = sample_phantom_params(rng, profile.raw_size, degradation)
        raw, raw_box = render_phantom(params, rng)
        styled = apply_site_style(raw, profile, rng)
        image, transform = letterbox(styled, canvas)
        roi = remap_roi(raw_box, transform)
        if validate_roi(roi, canvas):
            return Sample(image, roi, profile.site_id, sample_id, degradation)
        _LOGGER.debug(
            "Sample %s: ROI %s rejected on attempt %d", sample_id, roi.as_list(), attempt
        )
    raise DatasetIOError(
        f"Could not render a valid ROI for sample {sample_id} "
        f"after {MAX_RENDER_ATTEMPTS} attempts",
        error_details=sample_id,
    )


def generate_dataset(
    n_per_site: int,
    profiles: Sequence[SiteProfile],
    canvas: Sequence[int],
    seed: int,
    out_dir: Union[str, Path],
) -> Manifest:
    """Write ``n_per_site`` PGM samples per profile plus a JSONL manifest."""
    if len(profiles) < 2:
        raise ConfigValidationError("generate_dataset needs at least 2 site profiles")
    if n_per_site < MIN_PER_SITE:
        raise ConfigValidationError(
            f"n_per_site must be >= {MIN_PER_SITE}, got {n_per_site}"
        )
    site_ids = [profile.site_id for profile in profiles]
    if len(set(site_ids)) != len(site_ids):
        raise ConfigValidationError(f"Duplicate site ids in {site_ids}")

    root = Path(out_dir)
    images_dir = root / IMAGES_DIR
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DatasetIOError(
            f"Cannot create {images_dir}: {err}", error_details=str(images_dir)
        ) from err

    width, height = int(canvas[0]), int(canvas[1])
    manifest = Manifest(root=root)
    for profile in profiles:
        _LOGGER.info(
            "Generating %d samples for site '%s'", n_per_site, profile.site_id
        )
        for index in range(n_per_site):
            sample_id = f"{profile.site_id}-{index:04d}"
            sample = render_sample(profile, canvas, seed, sample_id)
            rel_path = f"{IMAGES_DIR}/{sample_id}.pgm"
            _write_pgm(root / rel_path, sample.image)
            manifest.entries.append(
                ManifestEntry(
                    id=sample_id,
                    site=profile.site_id,
                    path=rel_path,
                    roi=tuple(sample.roi.as_list()),  # type: ignore[arg-type]
                    width=width,
                    height=height,
                    degradation=round(sample.degradation, 6),
                )
            )
    write_manifest(manifest)
    _LOGGER.info(
        "Dataset written to %s: %d samples over %d sites",
        root,
        len(manifest.entries),
        len(profiles),
    )
    return manifest


def write_manifest(manifest: Manifest) -> Path:
    path = manifest.root / FILE_MANIFEST
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for entry in manifest.entries:
                handle.write(entry.to_json() + "\n")
    except OSError as err:
        raise DatasetIOError(
            f"Cannot write manifest {path}: {err}", error_details=str(path)
        ) from err
    return path


def load_manifest(path: Union[str, Path]) -> Manifest:
    """Read a manifest file, or the manifest inside a dataset directory."""
    path = Path(path)
    if path.is_dir():
        path = path / FILE_MANIFEST
    entries: list[ManifestEntry] = []
    try:
        with open(path, encoding="utf-8") as handle:
            for line_no, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    raw = json.loads(line)
                    entries.append(
                        ManifestEntry(
                            id=str(raw["id"]),
                            site=str(raw["site"]),
                            path=str(raw["path"]),
                            roi=tuple(float(v) for v in raw["roi"]),  # type: ignore[arg-type]
                            width=int(raw["width"]),
                            height=int(raw["height"]),
                            degradation=float(raw.get("degradation", 0.0)),
                        )
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                    raise DatasetIOError(
                        f"Malformed manifest line {line_no} in {path}: {err}",
                        error_details=str(path),
                    ) from err
    except OSError as err:
        raise DatasetIOError(
            f"Cannot read manifest {path}: {err}", error_details=str(path)
        ) from err
    _LOGGER.debug("Loaded %d manifest entries from %s", len(entries), path)
    return Manifest(root=path.parent, entries=entries)


def load_samples(
    manifest: Manifest, ids: Optional[Iterable[str]] = None
) -> list[Sample]:
    """Load images for ``ids`` (all entries when omitted), in the given order."""
    wanted = manifest.ids if ids is None else list(ids)
    lookup = {entry.id: entry for entry in manifest.entries}
    samples = []
    for sample_id in wanted:
        entry = lookup.get(sample_id)
        if entry is None:
            raise DatasetIOError(
                f"Sample id '{sample_id}' not in manifest {manifest.root}"
            )
        image = _read_pgm(manifest.root / entry.path)
        if image.shape != (entry.height, entry.width):
            raise DatasetIOError(
                f"Image {entry.path} is {image.shape[1]}x{image.shape[0]}, "
                f"manifest says {entry.width}x{entry.height}",
                error_details=entry.path,
            )
        samples.append(
            Sample(
                image=image,
                roi=RoiBox.from_sequence(entry.roi),
                site=entry.site,
                sample_id=entry.id,
                degradation=entry.degradation,
            )
        )
    return samples


# --- Splits ---
def make_split(manifest: Manifest, held_out_site: str, seed: int) -> SplitPlan:
    """Hold out one site for test; 15% of the rest (rounded) goes to validation."""
    test_ids = sorted(entry.id for entry in manifest.by_site(held_out_site))
    if not test_ids:
        raise SplitError(
            f"Held-out site '{held_out_site}' has no samples "
            f"(known sites: {manifest.sites})",
            error_details=held_out_site,
        )
    remaining = sorted(
        entry.id for entry in manifest.entries if entry.site != held_out_site
    )
    if not remaining:
        raise SplitError(f"No training sites left after holding out '{held_out_site}'")
    n_val = int(math.floor(VALIDATION_FRACTION * len(remaining) + 0.5))
    order = Rng(seed).stream(f"split/{held_out_site}").permutation(len(remaining))
    shuffled = [remaining[i] for i in order]
    val_ids = sorted(shuffled[:n_val])
    train_ids = sorted(shuffled[n_val:])
    if not train_ids:
        raise SplitError("Split leaves no training samples")
    plan = SplitPlan(held_out_site, tuple(train_ids), tuple(val_ids), tuple(test_ids))
    _LOGGER.info(
        "Split holding out '%s' (seed %d): train %d, val %d, test %d",
        held_out_site,
        seed,
        len(train_ids),
        len(val_ids),
        len(test_ids),
    )
    return plan


def make_pooled_split(manifest: Manifest, seed: int) -> SplitPlan:
    """All sites pooled; 15% (rounded) to validation and no test split."""
    ids = sorted(manifest.ids)
    if not ids:
        raise SplitError(f"Manifest {manifest.root} has no samples")
    n_val = int(math.floor(VALIDATION_FRACTION * len(ids) + 0.5))
    order = Rng(seed).stream("split/pooled").permutation(len(ids))
    shuffled = [ids[i] for i in order]
    val_ids = sorted(shuffled[:n_val])
    train_ids = sorted(shuffled[n_val:])
    if not train_ids or not val_ids:
        raise SplitError(f"Pooled split of {len(ids)} samples leaves an empty side")
    _LOGGER.info(
        "Pooled split (seed %d): train %d, val %d", seed, len(train_ids), len(val_ids)
    )
    return SplitPlan("", tuple(train_ids), tuple(val_ids), ())
