# roi_cae/model.py
"""Convolutional autoencoder with a GAP + linear latent head, and checkpoint IO."""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

import numpy as np

from .const import (
    CANVAS_DIVISOR,
    CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
    DEFAULT_BOTTLENECK_CHANNELS,
    DEFAULT_CANVAS,
    DEFAULT_CHANNELS,
    DEFAULT_LATENT_DIM,
    DEFAULT_LEAKY_SLOPE,
    PACKAGE_VERSION,
    FULL_BOTTLENECK_CHANNELS,
    FULL_CANVAS,
    FULL_CHANNELS,
    PHASES,
)
from .exceptions import (
    CanvasError,
    CheckpointError,
    CheckpointMismatchError,
    CheckpointVersionError,
    ConfigValidationError,
    CorruptCheckpointError,
    ShapeMismatchError,
)
from .preprocess import RoiBox
from .tensor import (
    Rng,
    Tensor,
    affine,
    conv2d,
    conv_transpose2d,
    global_avg_pool,
    leaky_relu,
    parameter,
    reshape,
    sigmoid,
)

_LOGGER = logging.getLogger(__name__)

KERNEL = 4
STRIDE = 2
PADDING = 1
STAGES = 4


@dataclass(frozen=True)
class CaeConfig:
    input_height: int = DEFAULT_CANVAS[1]
    input_width: int = DEFAULT_CANVAS[0]
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    bottleneck_channels: int = DEFAULT_BOTTLENECK_CHANNELS
    latent_dim: int = DEFAULT_LATENT_DIM
    leaky_slope: float = DEFAULT_LEAKY_SLOPE

    def __post_init__(self) -> None:
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.input_height % CANVAS_DIVISOR or self.input_width % CANVAS_DIVISOR:
            raise CanvasError(
                f"Input {self.input_width}x{self.input_height} must be divisible "
                f"by {CANVAS_DIVISOR}"
            )
        if len(self.channels) != STAGES or min(self.channels) < 1:
            raise ConfigValidationError(
                f"Need {STAGES} positive encoder widths, got {self.channels}"
            )
        if self.bottleneck_channels < 1:
            raise ConfigValidationError("bottleneck_channels must be >= 1")
        if self.latent_dim < 8:
            raise ConfigValidationError(
                f"latent_dim must be >= 8, got {self.latent_dim}"
            )
        if self.leaky_slope <= 0:
            raise ConfigValidationError("leaky_slope must be positive")

    @property
    def grid(self) -> tuple[int, int]:
        """Bottleneck spatial size (h, w)."""
        return (
            self.input_height // CANVAS_DIVISOR,
            self.input_width // CANVAS_DIVISOR,
        )

    @property
    def canvas(self) -> tuple[int, int]:
        return self.input_width, self.input_height

    def as_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["channels"] = list(self.channels)
        return payload

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> CaeConfig:
        try:
            return cls(
                input_height=int(payload["input_height"]),
                input_width=int(payload["input_width"]),
                channels=tuple(payload["channels"]),
                bottleneck_channels=int(payload["bottleneck_channels"]),
                latent_dim=int(payload["latent_dim"]),
                leaky_slope=float(payload["leaky_slope"]),
            )
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigValidationError(f"Invalid model config: {err}") from err


def desk_config(canvas: Sequence[int] = DEFAULT_CANVAS, **overrides: Any) -> CaeConfig:
    """Scaled-down widths that train in minutes on a CPU."""
    return CaeConfig(input_height=int(canvas[1]), input_width=int(canvas[0]), **overrides)


def full_config(canvas: Sequence[int] = FULL_CANVAS) -> CaeConfig:
    return CaeConfig(
        input_height=int(canvas[1]),
        input_width=int(canvas[0]),
        channels=FULL_CHANNELS,
        bottleneck_channels=FULL_BOTTLENECK_CHANNELS,
    )


def parameter_shapes(config: CaeConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every learnable block, in initialization order."""
    c = config.channels
    b = config.bottleneck_channels
    h, w = config.grid
    shapes: dict[str, tuple[int, ...]] = {}
    widths_in = (1, *c[:-1])
    for stage, (c_in, c_out) in enumerate(zip(widths_in, c), start=1):
        shapes[f"encoder.{stage}.weight"] = (c_out, c_in, KERNEL, KERNEL)
        shapes[f"encoder.{stage}.bias"] = (c_out,)
    shapes["bottleneck.weight"] = (b, c[-1], 1, 1)
    shapes["bottleneck.bias"] = (b,)
    shapes["proj.weight"] = (config.latent_dim, b)
    shapes["proj.bias"] = (config.latent_dim,)
    shapes["unproj.weight"] = (b * h * w, config.latent_dim)
    shapes["unproj.bias"] = (b * h * w,)
    decoder_widths = (b, c[2], c[1], c[0], 1)
    for stage in range(1, STAGES + 1):
        c_in, c_out = decoder_widths[stage - 1], decoder_widths[stage]
        shapes[f"decoder.{stage}.weight"] = (c_in, c_out, KERNEL, KERNEL)
        shapes[f"decoder.{stage}.bias"] = (c_out,)
    return shapes


def _fan_in(name: str, shapes: Mapping[str, tuple]) -> int:
    weight_shape = shapes[name.rsplit(".", 1)[0] + ".weight"]
    if name.startswith("decoder."):
        # transposed conv: input channels x kernel area
        return int(weight_shape[0] * weight_shape[2] * weight_shape[3])
    return int(np.prod(weight_shape[1:]))


def init_params(config: CaeConfig, seed: int) -> dict[str, np.ndarray]:
    """Uniform(±1/sqrt(fan_in)) for every weight and bias, from the init stream."""
    rng = Rng(seed).stream("init")
    shapes = parameter_shapes(config)
    params = {}
    for name, shape in shapes.items():
        bound = 1.0 / math.sqrt(_fan_in(name, shapes))
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def as_batch(images: np.ndarray, config: CaeConfig) -> np.ndarray:
    """Accept H×W, N×H×W or N×1×H×W and return N×1×H×W float64."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[1] != 1:
        raise ShapeMismatchError(f"Expected grayscale images, got shape {arr.shape}")
    if arr.shape[2:] != (config.input_height, config.input_width):
        raise ShapeMismatchError(
            f"Image size {arr.shape[3]}x{arr.shape[2]} does not match model input "
            f"{config.input_width}x{config.input_height}"
        )
    return arr


class ConvAutoencoder:
    """Four stride-2 conv stages, a 1×1 bottleneck, GAP + linear latent head,
    linear unprojection and four transposed-conv stages with a sigmoid output."""

    def __init__(self, config: CaeConfig, params: Mapping[str, np.ndarray]) -> None:
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            raise CheckpointMismatchError(
                "Parameter names do not match the model config: "
                f"missing {sorted(set(expected) - set(params))}, "
                f"unexpected {sorted(set(params) - set(expected))}"
            )
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise CheckpointMismatchError(
                    f"Parameter '{name}' has shape {tuple(params[name].shape)}, "
                    f"config expects {shape}"
                )
        self.config = config
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in expected}

    @classmethod
    def initialize(cls, config: CaeConfig, seed: int) -> ConvAutoencoder:
        return cls(config, init_params(config, seed))

    def __repr__(self) -> str:
        return (
            f"ConvAutoencoder({self.config.input_width}x{self.config.input_height}, "
            f"channels={self.config.channels}, latent={self.config.latent_dim})"
        )

    @property
    def num_parameters(self) -> int:
        return int(sum(block.size for block in self.params.values()))

    def with_params(self, params: Mapping[str, np.ndarray]) -> ConvAutoencoder:
        return ConvAutoencoder(self.config, params)

    def copy(self) -> ConvAutoencoder:
        return ConvAutoencoder(
            self.config, {name: block.copy() for name, block in self.params.items()}
        )

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        """Fresh leaves for one tape."""
        if requires_grad:
            return {name: parameter(block, name) for name, block in self.params.items()}
        return {name: Tensor(block, name=name) for name, block in self.params.items()}

    # --- Graph builders (operate on tape tensors) ---
    def encode(
        self, x: Tensor, p: Mapping[str, Tensor]
    ) -> tuple[Tensor, Tensor]:
        slope = self.config.leaky_slope
        h = x
        for stage in range(1, STAGES + 1):
            h = conv2d(
                h,
                p[f"encoder.{stage}.weight"],
                p[f"encoder.{stage}.bias"],
                stride=STRIDE,
                padding=PADDING,
            )
            h = leaky_relu(h, slope)
        z_map = leaky_relu(
            conv2d(h, p["bottleneck.weight"], p["bottleneck.bias"]), slope
        )
        z = affine(global_avg_pool(z_map), p["proj.weight"], p["proj.bias"])
        return z_map, z

    def decode(self, z: Tensor, p: Mapping[str, Tensor]) -> Tensor:
        slope = self.config.leaky_slope
        grid_h, grid_w = self.config.grid
        batch = z.shape[0] if z.ndim == 2 else 1
        h = affine(z, p["unproj.weight"], p["unproj.bias"])
        h = reshape(h, (batch, self.config.bottleneck_channels, grid_h, grid_w))
        for stage in range(1, STAGES + 1):
            h = conv_transpose2d(
                h,
                p[f"decoder.{stage}.weight"],
                p[f"decoder.{stage}.bias"],
                stride=STRIDE,
                padding=PADDING,
            )
            h = leaky_relu(h, slope) if stage < STAGES else sigmoid(h)
        return h

    def forward(
        self, x: Tensor, p: Mapping[str, Tensor]
    ) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(x_hat, z_map, z)``."""
        z_map, z = self.encode(x, p)
        return self.decode(z, p), z_map, z

    # --- Inference helpers (numpy in, numpy out) ---
    def encode_latent(self, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(z_map N×C×h×w, z N×latent)``; a single H×W image drops the batch axis."""
        single = np.ndim(images) == 2
        batch = as_batch(images, self.config)
        z_map, z = self.encode(Tensor(batch), self.tensors(requires_grad=False))
        if single:
            return z_map.data[0], z.data[0]
        return z_map.data, z.data

    def decode_latent(self, z: np.ndarray) -> np.ndarray:
        """Decode N×latent (or one latent vector) to N×1×H×W (or H×W)."""
        arr = np.asarray(z, dtype=np.float64)
        single = arr.ndim == 1
        if single:
            arr = arr[None, :]
        if arr.shape[-1] != self.config.latent_dim:
            raise ShapeMismatchError(
                f"Latent length {arr.shape[-1]} != latent_dim {self.config.latent_dim}"
            )
        out = self.decode(Tensor(arr), self.tensors(requires_grad=False)).data
        return out[0, 0] if single else out

    def reconstruct(self, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
        """Batched inference; returns the same layout as ``as_batch``."""
        batch = as_batch(images, self.config)
        params = self.tensors(requires_grad=False)
        chunks = []
        for start in range(0, batch.shape[0], batch_size):
            x_hat, _, _ = self.forward(Tensor(batch[start : start + batch_size]), params)
            chunks.append(x_hat.data)
        return np.concatenate(chunks, axis=0)


def roi_pool_features(
    z_map: np.ndarray, roi: RoiBox, divisor: int = CANVAS_DIVISOR
) -> np.ndarray:
    """Mean of ``z_map`` (C×h×w) over every feature cell the ROI touches."""
    arr = np.asarray(z_map, dtype=np.float64)
    if arr.ndim != 3:
        raise ShapeMismatchError(f"z_map must be C×h×w, got {arr.shape}")
    _, grid_h, grid_w = arr.shape
    x1, y1 = roi.x1 / divisor, roi.y1 / divisor
    x2, y2 = roi.x2 / divisor, roi.y2 / divisor
    col_lo = int(np.clip(math.floor(x1), 0, grid_w - 1))
    col_hi = int(np.clip(math.ceil(x2), col_lo + 1, grid_w))
    row_lo = int(np.clip(math.floor(y1), 0, grid_h - 1))
    row_hi = int(np.clip(math.ceil(y2), row_lo + 1, grid_h))
    return arr[:, row_lo:row_hi, col_lo:col_hi].mean(axis=(1, 2))


# --- Checkpoints ---
@dataclass
class Checkpoint:
    config: CaeConfig
    params: dict[str, np.ndarray]
    phase: str
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise CheckpointError(f"Unknown phase tag '{self.phase}'")

    @classmethod
    def from_model(
        cls, model: ConvAutoencoder, phase: str, **metadata: Any
    ) -> Checkpoint:
        return cls(
            model.config,
            {name: block.copy() for name, block in model.params.items()},
            phase,
            dict(metadata),
        )

    def model(self) -> ConvAutoencoder:
        return ConvAutoencoder(self.config, self.params)


def _encode_block(block: np.ndarray) -> dict[str, Any]:
    little = np.ascontiguousarray(block, dtype="<f8")
    return {
        "shape": list(block.shape),
        "data": base64.b64encode(little.tobytes()).decode("ascii"),
    }


def _decode_block(name: str, payload: Mapping[str, Any]) -> np.ndarray:
    try:
        shape = tuple(int(dim) for dim in payload["shape"])
        raw = base64.b64decode(payload["data"], validate=True)
        block = np.frombuffer(raw, dtype="<f8")
        return block.reshape(shape).astype(np.float64)
    except (KeyError, TypeError, ValueError) as err:
        raise CorruptCheckpointError(
            f"Parameter block '{name}' is malformed: {err}", error_details=name
        ) from err


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """JSON header plus base64 little-endian float64 parameter blocks."""
    path = Path(path)
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "package_version": PACKAGE_VERSION,
        "phase": checkpoint.phase,
        "config": checkpoint.config.as_dict(),
        "metadata": checkpoint.metadata,
        "params": {
            name: _encode_block(block) for name, block in sorted(checkpoint.params.items())
        },
    }
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, sort_keys=True), encoding="utf-8")
    except OSError as err:
        raise CheckpointError(
            f"Cannot write checkpoint {path}: {err}", error_details=str(path)
        ) from err
    _LOGGER.debug("Saved %s checkpoint to %s", checkpoint.phase, path)
    return path


def load_checkpoint(
    path: Union[str, Path], expected_config: Optional[CaeConfig] = None
) -> Checkpoint:
    """Load and validate a checkpoint; ``expected_config`` must match exactly."""
    path = Path(path)
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise CheckpointError(
            f"Checkpoint not found: {path}", error_details=str(path)
        ) from err
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptCheckpointError(
            f"Checkpoint {path} is unreadable or truncated: {err}",
            error_details=str(path),
        ) from err

    if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
        raise CorruptCheckpointError(
            f"{path} is not a {CHECKPOINT_FORMAT} file", error_details=str(path)
        )
    if document.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"Checkpoint {path} has format version {document.get('version')}, "
            f"expected {CHECKPOINT_VERSION}",
            error_details=str(path),
        )
    try:
        config = CaeConfig.from_dict(document["config"])
        raw_params = document["params"]
        phase = str(document["phase"])
        metadata = dict(document.get("metadata") or {})
    except (KeyError, TypeError, ConfigValidationError, CanvasError) as err:
        raise CorruptCheckpointError(
            f"Checkpoint {path} header is malformed: {err}", error_details=str(path)
        ) from err
    if not isinstance(raw_params, dict):
        raise CorruptCheckpointError(
            f"Checkpoint {path} params must be an object, got {type(raw_params).__name__}",
            error_details=str(path),
        )

    if expected_config is not None and config != expected_config:
        raise CheckpointMismatchError(
            f"Checkpoint {path} was written for {config}, expected {expected_config}",
            error_details=str(path),
        )
    params = {name: _decode_block(name, block) for name, block in raw_params.items()}
    ConvAutoencoder(config, params)
    return Checkpoint(config=config, params=params, phase=phase, metadata=metadata)
