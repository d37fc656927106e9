# roi_cae/tensor.py
"""Dense float64 tensors with a per-batch reverse-mode tape.

Every differentiable operation returns a new :class:`Tensor` holding a
:class:`ComputationRecord` (parents plus a backward rule closing over the
forward values it needs). The tape is the graph of records reachable from a
loss; it is rebuilt for every batch and dropped afterwards.
"""

from __future__ import annotations

import itertools
import logging
import zlib
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .exceptions import NonFiniteError, ShapeMismatchError

_LOGGER = logging.getLogger(__name__)

GradTuple = tuple[Optional[np.ndarray], ...]
BackwardFn = Callable[[np.ndarray], GradTuple]
Operand = Union["Tensor", np.ndarray, float, int]

_NODE_IDS = itertools.count(1)


@dataclass(frozen=True)
class ComputationRecord:
    """One node of the tape."""

    node_id: int
    op: str
    parents: tuple["Tensor", ...]
    backward: BackwardFn

    @property
    def parent_ids(self) -> tuple[int, ...]:
        return tuple(parent.node_id for parent in self.parents)


class Tensor:
    """Row-major float64 array that may participate in the tape."""

    __slots__ = ("data", "requires_grad", "name", "node_id", "record")
    __array_priority__ = 100

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence],
        requires_grad: bool = False,
        name: Optional[str] = None,
    ) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node_id = next(_NODE_IDS)
        self.record: Optional[ComputationRecord] = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        op = f" op={self.record.op}" if self.record else ""
        return f"Tensor(shape={self.shape}{label}{op})"

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError(
                f"item() needs a single-element tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    # --- Operator sugar ---
    def __add__(self, other: Operand) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Operand) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Operand) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Operand) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Operand) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Operand) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Operand) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> Tensor:
        return div(other, self)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)


def as_tensor(value: Operand) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def parameter(data: np.ndarray, name: Optional[str] = None) -> Tensor:
    """Fresh leaf that gradients are collected for."""
    return Tensor(data, requires_grad=True, name=name)


def _result(
    data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward: BackwardFn
) -> Tensor:
    out = Tensor(data)
    if any(parent.requires_grad for parent in parents):
        out.requires_grad = True
        out.record = ComputationRecord(out.node_id, op, parents, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as err:
        raise ShapeMismatchError(
            f"{op}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from err


# --- Elementwise arithmetic ---
def add(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("add", ta, tb)

    def backward(g: np.ndarray) -> GradTuple:
        return _unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)

    return _result(ta.data + tb.data, "add", (ta, tb), backward)


def sub(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", ta, tb)

    def backward(g: np.ndarray) -> GradTuple:
        return _unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)

    return _result(ta.data - tb.data, "sub", (ta, tb), backward)


def mul(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", ta, tb)

    def backward(g: np.ndarray) -> GradTuple:
        return (
            _unbroadcast(g * tb.data, ta.shape),
            _unbroadcast(g * ta.data, tb.shape),
        )

    return _result(ta.data * tb.data, "mul", (ta, tb), backward)


def div(a: Operand, b: Operand) -> Tensor:
    ta, tb = as_tensor(a), as_tensor(b)
    _check_broadcast("div", ta, tb)
    out = ta.data / tb.data

    def backward(g: np.ndarray) -> GradTuple:
        return (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * out / tb.data, tb.shape),
        )

    return _result(out, "div", (ta, tb), backward)


def neg(a: Operand) -> Tensor:
    ta = as_tensor(a)
    return _result(-ta.data, "neg", (ta,), lambda g: (-g,))


def power(a: Operand, exponent: float) -> Tensor:
    """Elementwise a**exponent; the derivative is taken as 0 where a == 0."""
    ta = as_tensor(a)
    exponent = float(exponent)
    out = np.power(ta.data, exponent)

    def backward(g: np.ndarray) -> GradTuple:
        with np.errstate(divide="ignore", invalid="ignore"):
            local = exponent * np.power(ta.data, exponent - 1.0)
        local = np.where(ta.data == 0.0, 0.0 if exponent != 1.0 else 1.0, local)
        return (g * local,)

    return _result(out, "pow", (ta,), backward)


def sqrt(a: Operand) -> Tensor:
    ta = as_tensor(a)
    out = np.sqrt(ta.data)
    return _result(out, "sqrt", (ta,), lambda g: (0.5 * g / out,))


def absolute(a: Operand) -> Tensor:
    ta = as_tensor(a)
    return _result(
        np.abs(ta.data), "abs", (ta,), lambda g: (g * np.sign(ta.data),)
    )


def exp(a: Operand) -> Tensor:
    ta = as_tensor(a)
    out = np.exp(ta.data)
    return _result(out, "exp", (ta,), lambda g: (g * out,))


def log(a: Operand) -> Tensor:
    ta = as_tensor(a)
    return _result(np.log(ta.data), "log", (ta,), lambda g: (g / ta.data,))


# --- Activations ---
def relu(a: Operand) -> Tensor:
    ta = as_tensor(a)
    positive = ta.data > 0.0
    return _result(
        np.where(positive, ta.data, 0.0), "relu", (ta,), lambda g: (g * positive,)
    )


def leaky_relu(a: Operand, alpha: float = 0.1) -> Tensor:
    if alpha <= 0:
        raise ValueError(f"leaky_relu slope must be positive, got {alpha}")
    ta = as_tensor(a)
    positive = ta.data >= 0.0
    slope = np.where(positive, 1.0, alpha)
    return _result(ta.data * slope, "leaky_relu", (ta,), lambda g: (g * slope,))


def sigmoid(a: Operand) -> Tensor:
    ta = as_tensor(a)
    out = special.expit(ta.data)
    return _result(out, "sigmoid", (ta,), lambda g: (g * out * (1.0 - out),))


def pointwise_activation(a: Operand, kind: str, alpha: float = 0.1) -> Tensor:
    """Dispatch by name: ``leaky_relu`` or ``sigmoid``."""
    if kind == "leaky_relu":
        return leaky_relu(a, alpha)
    if kind == "sigmoid":
        return sigmoid(a)
    raise ValueError(f"Unknown activation '{kind}'")


# --- Reductions and reshapes ---
def _normalize_axes(axis: Union[int, Sequence[int], None], ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(
    a: Operand, axis: Union[int, Sequence[int], None] = None, keepdims: bool = False
) -> Tensor:
    ta = as_tensor(a)
    axes = _normalize_axes(axis, ta.ndim)
    out = ta.data.sum(axis=axes, keepdims=keepdims)

    def backward(g: np.ndarray) -> GradTuple:
        if not keepdims:
            for ax in axes:
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, ta.shape).copy(),)

    return _result(out, "sum", (ta,), backward)


def reduce_mean(
    a: Operand, axis: Union[int, Sequence[int], None] = None, keepdims: bool = False
) -> Tensor:
    ta = as_tensor(a)
    axes = _normalize_axes(axis, ta.ndim)
    count = int(np.prod([ta.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(ta, axes, keepdims) / float(count)


def reduce_max(a: Operand, axis: Union[int, Sequence[int], None] = None) -> Tensor:
    """Max over ``axis`` (kept as size-1 dims); ties share the gradient."""
    ta = as_tensor(a)
    axes = _normalize_axes(axis, ta.ndim)
    out = ta.data.max(axis=axes, keepdims=True)

    def backward(g: np.ndarray) -> GradTuple:
        winners = (ta.data == out).astype(np.float64)
        winners /= winners.sum(axis=axes, keepdims=True)
        return (g * winners,)

    return _result(out, "max", (ta,), backward)


def reshape(a: Operand, shape: Sequence[int]) -> Tensor:
    ta = as_tensor(a)
    out = ta.data.reshape(tuple(shape))
    return _result(out, "reshape", (ta,), lambda g: (g.reshape(ta.shape),))


def global_avg_pool(a: Operand) -> Tensor:
    """N×C×H×W -> N×C mean over each spatial plane."""
    ta = as_tensor(a)
    if ta.ndim != 4:
        raise ShapeMismatchError(f"global_avg_pool expects NCHW, got {ta.shape}")
    if ta.shape[2] < 1 or ta.shape[3] < 1:
        raise ShapeMismatchError(f"global_avg_pool needs H,W >= 1, got {ta.shape}")
    return reduce_mean(ta, axis=(2, 3))


def avg_pool2(a: Operand) -> Tensor:
    """2×2 stride-2 average pooling; a trailing odd row/column is dropped."""
    ta = as_tensor(a)
    n, c, h, w = ta.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        raise ShapeMismatchError(f"avg_pool2 needs H,W >= 2, got {ta.shape}")
    out = ta.data[:, :, : 2 * h2, : 2 * w2].reshape(n, c, h2, 2, w2, 2).mean((3, 5))

    def backward(g: np.ndarray) -> GradTuple:
        grad = np.zeros(ta.shape)
        grad[:, :, : 2 * h2, : 2 * w2] = (
            np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
        )
        return (grad,)

    return _result(out, "avg_pool2", (ta,), backward)


def pad_replicate(a: Operand, pad: int) -> Tensor:
    """Edge-replicate padding of the two trailing (spatial) axes."""
    ta = as_tensor(a)
    h, w = ta.shape[-2:]
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = ta.data[..., rows[:, None], cols[None, :]]

    def backward(g: np.ndarray) -> GradTuple:
        by_row = np.zeros(g.shape[:-2] + (h, g.shape[-1]))
        for k, row in enumerate(rows):
            by_row[..., row, :] += g[..., k, :]
        grad = np.zeros(ta.shape)
        for k, col in enumerate(cols):
            grad[..., col] += by_row[..., k]
        return (grad,)

    return _result(out, "pad_replicate", (ta,), backward)


# --- Linear algebra ---
def affine(x: Operand, weight: Operand, bias: Operand) -> Tensor:
    """W·x + b for a vector x, or row-wise for a batch N×in."""
    tx, tw, tb = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if tw.ndim != 2 or tb.ndim != 1:
        raise ShapeMismatchError(
            f"affine expects a matrix and a vector, got W {tw.shape}, b {tb.shape}"
        )
    if tx.shape[-1] != tw.shape[1]:
        raise ShapeMismatchError(
            f"affine: input length {tx.shape[-1]} != W columns {tw.shape[1]}"
        )
    if tw.shape[0] != tb.shape[0]:
        raise ShapeMismatchError(
            f"affine: W rows {tw.shape[0]} != b length {tb.shape[0]}"
        )
    batched = tx.ndim == 2
    xs = tx.data if batched else tx.data[None, :]
    out = xs @ tw.data.T + tb.data
    if not batched:
        out = out[0]

    def backward(g: np.ndarray) -> GradTuple:
        gs = g if batched else g[None, :]
        gx = gs @ tw.data
        return (
            gx if batched else gx[0],
            gs.T @ xs,
            gs.sum(axis=0),
        )

    return _result(out, "affine", (tx, tw, tb), backward)


# --- Convolutions ---
def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """N×C×H×W -> N×C×H'×W'×kh×kw window view (zero padding)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _col2im(
    cols: np.ndarray,
    out_shape: tuple[int, int, int, int],
    stride: int,
    padding: int,
) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add windows back onto the image."""
    n, c, h, w = out_shape
    _, _, ho, wo, kh, kw = cols.shape
    padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            padded[
                :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
            ] += cols[:, :, :, :, i, j]
    return padded[:, :, padding : padding + h, padding : padding + w]


def _check_conv_args(
    op: str, x: Tensor, kernel: Tensor, bias: Tensor, stride: int, padding: int
) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"{op}: input must be NCHW, got {x.shape}")
    if kernel.ndim != 4:
        raise ShapeMismatchError(f"{op}: kernel must be 4-D, got {kernel.shape}")
    if stride < 1:
        raise ShapeMismatchError(f"{op}: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeMismatchError(f"{op}: padding must be >= 0, got {padding}")
    if x.shape[1] != kernel.shape[0 if op == "conv_transpose2d" else 1]:
        raise ShapeMismatchError(
            f"{op}: input channels {x.shape[1]} do not match kernel in-channels "
            f"{kernel.shape[0 if op == 'conv_transpose2d' else 1]}"
        )
    out_channels = kernel.shape[1 if op == "conv_transpose2d" else 0]
    if bias.shape != (out_channels,):
        raise ShapeMismatchError(
            f"{op}: bias shape {bias.shape} != out-channels ({out_channels},)"
        )


def conv2d(
    x: Operand, kernel: Operand, bias: Operand, stride: int = 1, padding: int = 0
) -> Tensor:
    """Cross-correlation; kernel OutC×InC×kH×kW, zero padding."""
    tx, tk, tb = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    _check_conv_args("conv2d", tx, tk, tb, stride, padding)
    _, _, h, w = tx.shape
    _, _, kh, kw = tk.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1:
        raise ShapeMismatchError(
            f"conv2d: height {h} too small for kernel {kh} with padding {padding}"
        )
    if wo < 1:
        raise ShapeMismatchError(
            f"conv2d: width {w} too small for kernel {kw} with padding {padding}"
        )
    cols = _im2col(tx.data, kh, kw, stride, padding)
    out = np.tensordot(cols, tk.data, axes=([1, 4, 5], [1, 2, 3]))
    out = out.transpose(0, 3, 1, 2) + tb.data[None, :, None, None]

    def backward(g: np.ndarray) -> GradTuple:
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, tk.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
        gx = _col2im(gcols, tx.shape, stride, padding)
        return gx, gk, g.sum(axis=(0, 2, 3))

    return _result(np.ascontiguousarray(out), "conv2d", (tx, tk, tb), backward)


def conv_transpose2d(
    x: Operand, kernel: Operand, bias: Operand, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`; kernel InC×OutC×kH×kW.

    Output size is (H-1)·stride - 2·padding + kH, so k=4, s=2, p=1 doubles.
    """
    tx, tk, tb = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    _check_conv_args("conv_transpose2d", tx, tk, tb, stride, padding)
    n, _, h, w = tx.shape
    _, out_c, kh, kw = tk.shape
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(
            f"conv_transpose2d: output size {ho}x{wo} is empty for input {tx.shape}"
        )
    cols = np.tensordot(tx.data, tk.data, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    out = _col2im(cols, (n, out_c, ho, wo), stride, padding)
    out = out + tb.data[None, :, None, None]

    def backward(g: np.ndarray) -> GradTuple:
        gcols = _im2col(g, kh, kw, stride, padding)
        gx = np.tensordot(gcols, tk.data, axes=([1, 4, 5], [1, 2, 3]))
        gk = np.tensordot(tx.data, gcols, axes=([0, 2, 3], [0, 2, 3]))
        return gx.transpose(0, 3, 1, 2), gk, g.sum(axis=(0, 2, 3))

    return _result(out, "conv_transpose2d", (tx, tk, tb), backward)


# --- Classification ---
def cross_entropy(logits: Operand, labels: np.ndarray) -> Tensor:
    """Mean multinomial cross-entropy of N×K logits against integer labels."""
    tl = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if tl.ndim != 2 or labels.shape != (tl.shape[0],):
        raise ShapeMismatchError(
            f"cross_entropy: logits {tl.shape} vs labels {labels.shape}"
        )
    log_probs = special.log_softmax(tl.data, axis=1)
    rows = np.arange(tl.shape[0])
    out = -log_probs[rows, labels].mean()

    def backward(g: np.ndarray) -> GradTuple:
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (g * grad / tl.shape[0],)

    return _result(np.asarray(out), "cross_entropy", (tl,), backward)


# --- Reverse pass ---
def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        if node.record is not None:
            for parent in node.record.parents:
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Return d(loss)/d(param) for every named parameter.

    Parameters the loss does not reach receive a zero gradient.
    """
    if loss.size != 1:
        raise ShapeMismatchError(
            f"backward needs a scalar loss, got shape {loss.shape}"
        )
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(_topological_order(loss)):
        record = node.record
        if record is None:
            continue
        upstream = grads.pop(node.node_id, None)
        if upstream is None:
            continue
        for parent, grad in zip(record.parents, record.backward(upstream)):
            if grad is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + grad
            else:
                grads[parent.node_id] = np.array(grad, dtype=np.float64)
    return {
        name: grads.get(tensor.node_id, np.zeros_like(tensor.data)).reshape(
            tensor.shape
        )
        for name, tensor in params.items()
    }


def ensure_finite(value: Union[Tensor, np.ndarray, float], context: str) -> None:
    """Raise :class:`NonFiniteError` naming ``context`` if anything is NaN/inf."""
    data = value.data if isinstance(value, Tensor) else np.asarray(value)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Non-finite value in {context}", error_details=context)


# --- Seeded randomness ---
class Rng:
    """Seeded generator factory with independent named sub-streams.

    ``Rng(seed).stream("init")`` always yields the same sequence, and streams
    with different names are statistically independent.
    """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed})"

    def stream(self, name: str) -> np.random.Generator:
        key = zlib.crc32(name.encode("utf-8"))
        sequence = np.random.SeedSequence(self.seed, spawn_key=(key,))
        return np.random.Generator(np.random.PCG64(sequence))
