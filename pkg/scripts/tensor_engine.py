#!/usr/bin/env python3
"""
Tensor Engine
=============

Dense numpy-backed tensors with a reverse-mode computation tape.

Every operator is a pure function: it reads the ``data`` of its inputs,
builds a fresh output array and, when a ComputationTape is active in the
current thread and at least one input requires gradients, records a node
holding the closure that maps the output gradient to input gradients.

Usage:
    x = Tensor(np.random.randn(1, 3, 8, 8), requires_grad=True)
    with ComputationTape() as tape:
        loss = sum_(activation(x, "sigmoid"))
    grads = backward_pass(tape, loss)
    grads[x.id]  # numpy array shaped like x

Environment Variables:
- SODA_DTYPE: default compute precision for new tensors (float32 | float64)
"""

import itertools
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.dtype(os.environ.get("SODA_DTYPE", "float32"))

BATCHNORM_MOMENTUM = 0.1
NORM_EPSILON = 1e-5

_tensor_ids = itertools.count(1)
_tape_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operator."""


class TapeError(RuntimeError):
    """Raised when a backward pass cannot be run on the given tape/loss."""


class Tensor:
    """Immutable dense array plus a gradient flag."""

    __slots__ = ("data", "requires_grad", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            source = np.asarray(data)
            dtype = source.dtype if source.dtype.kind == "f" else DEFAULT_DTYPE
        array = np.array(data, dtype=dtype, copy=True)
        array.flags.writeable = False
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.id = next(_tensor_ids)

    @classmethod
    def _wrap(cls, array: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Adopt a freshly computed array without copying it."""
        tensor = cls.__new__(cls)
        array.flags.writeable = False
        tensor.data = array
        tensor.requires_grad = requires_grad
        tensor.id = next(_tensor_ids)
        return tensor

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_dtype(tensor: Tensor, dtype) -> Tensor:
    """Return a copy of ``tensor`` at another precision (gradient flag kept)."""
    return Tensor(tensor.data, requires_grad=tensor.requires_grad, dtype=dtype)


@dataclass
class TapeNode:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.id for t in self.inputs)


class ComputationTape:
    """Ordered record of operations; used as a context manager."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.gradients: Dict[int, np.ndarray] = {}
        self._produced: Dict[int, int] = {}

    def __enter__(self) -> "ComputationTape":
        stack = getattr(_tape_state, "stack", None)
        if stack is None:
            stack = _tape_state.stack = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_state.stack.pop()
        return False

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.nodes.append(TapeNode(op, tuple(inputs), output, backward))
        self._produced[output.id] = len(self.nodes) - 1

    def produced(self, tensor: Tensor) -> bool:
        return tensor.id in self._produced

    def grad(self, tensor: Tensor) -> Optional[Tensor]:
        """Gradient of the last backward pass w.r.t. ``tensor``, if reached."""
        array = self.gradients.get(tensor.id)
        return None if array is None else Tensor._wrap(array)

    def grad_array(self, tensor: Tensor) -> np.ndarray:
        array = self.gradients.get(tensor.id)
        return np.zeros(tensor.shape, dtype=tensor.dtype) if array is None else array


def active_tape() -> Optional[ComputationTape]:
    stack = getattr(_tape_state, "stack", None)
    return stack[-1] if stack else None


def _lift(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor._wrap(np.array(value, dtype=dtype))


def _emit(op: str, inputs: Sequence[Tensor], array: np.ndarray, backward) -> Tensor:
    """Wrap ``array`` as an operator output and record it when needed."""
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    array = np.asarray(array)
    if not array.flags.c_contiguous:
        array = np.ascontiguousarray(array)
    out = Tensor._wrap(array, requires_grad=needs_grad)
    if needs_grad:
        tape.record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise and structural operators
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", (a, b), a.data * b.data, backward)


def div(a, b) -> Tensor:
    a, b = _lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _emit("div", (a, b), out, backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _emit("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def abs_(x: Tensor) -> Tensor:
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def _normalize_axes(axis, ndim: int) -> Optional[Tuple[int, ...]]:
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), np.asarray(out), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _emit("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def flip(x: Tensor, axis: int) -> Tensor:
    return _emit("flip", (x,), np.flip(x.data, axis=axis), lambda g: (np.flip(g, axis=axis),))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of an N x C x H x W tensor."""
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice {start}:{stop} out of range for shape {x.shape}")

    def backward(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _emit("channel_slice", (x,), x.data[:, start:stop], backward)


def concat(inputs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Channel concatenation of rank-4 tensors, input order preserved."""
    if not inputs:
        raise ShapeError("concat needs at least one input")
    if axis != 1:
        raise ShapeError(f"concat supports the channel axis only, got axis={axis}")
    reference = inputs[0].shape
    for t in inputs:
        if t.ndim != 4 or t.shape[0] != reference[0] or t.shape[2:] != reference[2:]:
            raise ShapeError(
                f"concat inputs must share batch and spatial dims: {[x.shape for x in inputs]}"
            )
    bounds = np.cumsum([0] + [t.shape[1] for t in inputs])

    def backward(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(inputs)))

    return _emit("concat", tuple(inputs), np.concatenate([t.data for t in inputs], axis=1), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes (equal leading dims)."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return _emit("matmul", (a, b), a.data @ b.data, backward)


def activation(x: Tensor, kind: str) -> Tensor:
    """Elementwise relu or sigmoid."""
    if kind == "relu":
        mask = x.data > 0
        return _emit("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))
    if kind == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))
    raise ValueError(f"Unknown activation kind: {kind!r}")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Per-element binary cross-entropy on sigmoid(logits), stable form."""
    target = _lift(target, logits)
    if logits.shape != target.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: {logits.shape} vs {target.shape}")
    z, t = logits.data, target.data
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))

    def backward(g):
        return g * (prob - t), g * (-z)

    return _emit("bce_with_logits", (logits, target), out, backward)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

@dataclass
class ConvWeights:
    """Kernel (out, in/groups, kh, kw), optional bias and geometry."""

    kernel: Tensor
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    groups: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be rank 4, got {self.kernel.shape}")
        if self.stride < 1 or self.dilation < 1 or self.padding < 0 or self.groups < 1:
            raise ShapeError(
                f"invalid conv geometry stride={self.stride} padding={self.padding} "
                f"dilation={self.dilation} groups={self.groups}"
            )
        if self.kernel.shape[0] % self.groups:
            raise ShapeError(f"out_channels {self.kernel.shape[0]} not divisible by groups {self.groups}")
        if self.bias is not None and self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(f"bias shape {self.bias.shape} does not match kernel {self.kernel.shape}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1] * self.groups


def conv_output_size(size: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def pool_output_size(size: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _strided_window(array: np.ndarray, row: int, col: int, out_h: int, out_w: int, stride: int):
    return array[:, :, row:row + stride * (out_h - 1) + 1:stride, col:col + stride * (out_w - 1) + 1:stride]


def conv2d(input: Tensor, weights: ConvWeights) -> Tensor:
    """2-D cross-correlation (patch-matrix strategy) with dilation and groups."""
    if input.ndim != 4:
        raise ShapeError(f"conv2d input must be rank 4, got {input.shape}")
    n, c, h, w = input.shape
    if c != weights.in_channels:
        raise ShapeError(
            f"conv2d channel mismatch: input {input.shape} vs kernel {weights.kernel.shape} "
            f"(groups={weights.groups})"
        )
    o, cg, kh, kw = weights.kernel.shape
    s, p, d, groups = weights.stride, weights.padding, weights.dilation, weights.groups
    extent_h, extent_w = d * (kh - 1) + 1, d * (kw - 1) + 1
    if h + 2 * p < extent_h or w + 2 * p < extent_w:
        raise ShapeError(
            f"effective kernel {extent_h}x{extent_w} exceeds padded input "
            f"{h + 2 * p}x{w + 2 * p} (input {input.shape}, kernel {weights.kernel.shape})"
        )
    out_h = conv_output_size(h, kh, s, p, d)
    out_w = conv_output_size(w, kw, s, p, d)
    og = o // groups

    padded = np.pad(input.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else input.data
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=input.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = _strided_window(padded, i * d, j * d, out_h, out_w, s)
    cols = cols.reshape(n, groups, cg * kh * kw, out_h * out_w)
    kernel = weights.kernel.data.reshape(groups, og, cg * kh * kw)

    out = np.empty((n, groups, og, out_h * out_w), dtype=np.result_type(input.dtype, kernel.dtype))
    for g in range(groups):
        out[:, g] = np.matmul(kernel[g], cols[:, g])
    out = out.reshape(n, o, out_h, out_w)
    if weights.bias is not None:
        out = out + weights.bias.data.reshape(1, o, 1, 1)

    def backward(grad):
        grad_g = grad.reshape(n, groups, og, out_h * out_w)
        d_kernel = np.empty_like(kernel)
        d_cols = np.empty_like(cols)
        for g in range(groups):
            d_kernel[g] = np.einsum("nop,nkp->ok", grad_g[:, g], cols[:, g])
            d_cols[:, g] = np.matmul(kernel[g].T, grad_g[:, g])
        d_cols = d_cols.reshape(n, c, kh, kw, out_h, out_w)
        d_padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                _strided_window(d_padded, i * d, j * d, out_h, out_w, s)[...] += d_cols[:, :, i, j]
        d_input = d_padded[:, :, p:p + h, p:p + w]
        grads = [d_input, d_kernel.reshape(weights.kernel.shape)]
        if weights.bias is not None:
            grads.append(grad.sum(axis=(0, 2, 3)))
        return grads

    inputs = (input, weights.kernel) + ((weights.bias,) if weights.bias is not None else ())
    return _emit("conv2d", inputs, out, backward)


# ---------------------------------------------------------------------------
# Pooling and resampling
# ---------------------------------------------------------------------------

def pool2d(input: Tensor, mode: str, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Max or average pooling; average counts padded zeros in the divisor."""
    if mode not in ("max", "avg"):
        raise ValueError(f"Unknown pooling mode: {mode!r}")
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError(f"invalid pooling geometry kernel={kernel} stride={stride} padding={padding}")
    n, c, h, w = input.shape
    if h + 2 * padding < kernel or w + 2 * padding < kernel:
        raise ShapeError(f"pool kernel {kernel} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    out_h = pool_output_size(h, kernel, stride, padding)
    out_w = pool_output_size(w, kernel, stride, padding)
    fill = -np.inf if mode == "max" else 0.0
    padded = (
        np.pad(input.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=fill)
        if padding else input.data
    )

    if mode == "max":
        out = np.full((n, c, out_h, out_w), -np.inf, dtype=input.dtype)
        argmax = np.zeros((n, c, out_h, out_w), dtype=np.int64)
        for i in range(kernel):
            for j in range(kernel):
                window = _strided_window(padded, i, j, out_h, out_w, stride)
                better = window > out
                out = np.where(better, window, out)
                argmax = np.where(better, i * kernel + j, argmax)

        def backward(grad):
            d_padded = np.zeros(padded.shape, dtype=grad.dtype)
            for i in range(kernel):
                for j in range(kernel):
                    hit = argmax == i * kernel + j
                    _strided_window(d_padded, i, j, out_h, out_w, stride)[...] += np.where(hit, grad, 0)
            return (d_padded[:, :, padding:padding + h, padding:padding + w],)
    else:
        out = np.zeros((n, c, out_h, out_w), dtype=input.dtype)
        for i in range(kernel):
            for j in range(kernel):
                out += _strided_window(padded, i, j, out_h, out_w, stride)
        out /= kernel * kernel

        def backward(grad):
            share = grad / (kernel * kernel)
            d_padded = np.zeros(padded.shape, dtype=grad.dtype)
            for i in range(kernel):
                for j in range(kernel):
                    _strided_window(d_padded, i, j, out_h, out_w, stride)[...] += share
            return (d_padded[:, :, padding:padding + h, padding:padding + w],)

    return _emit(f"{mode}_pool2d", (input,), out, backward)


@lru_cache(maxsize=64)
def _interpolation_matrix(in_size: int, out_size: int, dtype_name: str) -> np.ndarray:
    """Rows of half-pixel-center linear interpolation weights (out x in)."""
    matrix = np.zeros((out_size, in_size), dtype=np.float64)
    scale = in_size / out_size
    for o in range(out_size):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        lam = src - i0
        matrix[o, i0] += 1.0 - lam
        matrix[o, i1] += lam
    matrix = matrix.astype(dtype_name)
    matrix.flags.writeable = False
    return matrix


def bilinear_resize(input: Tensor, out_h: int, out_w: int) -> Tensor:
    """Separable bilinear resampling, align-corners off."""
    if input.ndim != 4:
        raise ShapeError(f"bilinear_resize input must be rank 4, got {input.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {out_h}x{out_w}")
    _, _, h, w = input.shape
    rows = _interpolation_matrix(h, out_h, input.dtype.name)
    cols = _interpolation_matrix(w, out_w, input.dtype.name)
    out = np.matmul(np.matmul(rows, input.data), cols.T)

    def backward(grad):
        return (np.matmul(rows.T, np.matmul(grad, cols)),)

    return _emit("bilinear_resize", (input,), out, backward)


def bilinear_upsample(input: Tensor, factor: int) -> Tensor:
    if factor < 2:
        raise ShapeError(f"upsample factor must be >= 2, got {factor}")
    return bilinear_resize(input, input.shape[2] * factor, input.shape[3] * factor)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass
class RunningStats:
    """Batch-norm running statistics; training-mode normalize updates them in place."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = BATCHNORM_MOMENTUM

    @classmethod
    def fresh(cls, channels: int, dtype=DEFAULT_DTYPE) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def normalize(
    input: Tensor,
    mode: str,
    scale: Tensor,
    shift: Tensor,
    groups: int = 1,
    epsilon: float = NORM_EPSILON,
    training: bool = True,
    running_stats: Optional[RunningStats] = None,
) -> Tensor:
    """Batch or group normalization followed by a per-channel affine map."""
    n, c, h, w = input.shape
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"affine parameters {scale.shape}/{shift.shape} do not match {c} channels")
    gamma = scale.data.reshape(1, c, 1, 1)
    beta = shift.data.reshape(1, c, 1, 1)

    if mode == "group":
        if groups < 1 or c % groups:
            raise ShapeError(f"channels {c} not divisible by groups {groups}")
        flat = input.data.reshape(n, groups, -1)
        mu = flat.mean(axis=-1, keepdims=True)
        var = flat.var(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + epsilon)
        xhat = ((flat - mu) * inv_std).reshape(input.shape)

        def normalized_grad(dxhat):
            d = dxhat.reshape(n, groups, -1)
            xr = xhat.reshape(n, groups, -1)
            dx = (d - d.mean(axis=-1, keepdims=True) - xr * (d * xr).mean(axis=-1, keepdims=True)) * inv_std
            return dx.reshape(input.shape)

    elif mode == "batch":
        if training:
            mu = input.data.mean(axis=(0, 2, 3), keepdims=True)
            var = input.data.var(axis=(0, 2, 3), keepdims=True)
            inv_std = 1.0 / np.sqrt(var + epsilon)
            xhat = (input.data - mu) * inv_std
            if running_stats is not None:
                count = n * h * w
                unbiased = var.reshape(c) * (count / max(count - 1, 1))
                m = running_stats.momentum
                running_stats.mean = ((1 - m) * running_stats.mean + m * mu.reshape(c)).astype(running_stats.mean.dtype)
                running_stats.var = ((1 - m) * running_stats.var + m * unbiased).astype(running_stats.var.dtype)

            def normalized_grad(dxhat):
                axes = (0, 2, 3)
                return (
                    dxhat
                    - dxhat.mean(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
                ) * inv_std
        else:
            if running_stats is None:
                raise ValueError("batch normalization in eval mode needs running statistics")
            inv_std = (1.0 / np.sqrt(running_stats.var + epsilon)).reshape(1, c, 1, 1).astype(input.dtype)
            xhat = (input.data - running_stats.mean.reshape(1, c, 1, 1)) * inv_std

            def normalized_grad(dxhat):
                return dxhat * inv_std
    else:
        raise ValueError(f"Unknown normalization mode: {mode!r}")

    out = gamma * xhat + beta

    def backward(grad):
        return (
            normalized_grad(grad * gamma),
            (grad * xhat).sum(axis=(0, 2, 3)),
            grad.sum(axis=(0, 2, 3)),
        )

    return _emit(f"{mode}_norm", (input, scale, shift), out.astype(input.dtype), backward)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

def scaled_dot_attention(queries: Tensor, keys: Tensor, values: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over (batch, tokens, features) operands."""
    if queries.ndim != 3 or keys.ndim != 3 or values.ndim != 3:
        raise ShapeError(f"attention operands must be rank 3: {queries.shape}, {keys.shape}, {values.shape}")
    if queries.shape[-1] != keys.shape[-1]:
        raise ShapeError(f"head dimension mismatch: queries {queries.shape} vs keys {keys.shape}")
    if keys.shape[:2] != values.shape[:2] or queries.shape[0] != keys.shape[0]:
        raise ShapeError(f"key/value token mismatch: keys {keys.shape} vs values {values.shape}")
    scale = 1.0 / math.sqrt(queries.shape[-1])
    q, k, v = queries.data, keys.data, values.data
    scores = np.matmul(q, np.swapaxes(k, 1, 2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = np.matmul(weights, v)

    def backward(grad):
        d_values = np.matmul(np.swapaxes(weights, 1, 2), grad)
        d_weights = np.matmul(grad, np.swapaxes(v, 1, 2))
        d_scores = weights * (d_weights - (d_weights * weights).sum(axis=-1, keepdims=True)) * scale
        return np.matmul(d_scores, k), np.matmul(np.swapaxes(d_scores, 1, 2), q), d_values

    return _emit("attention", (queries, keys, values), out, backward)


# ---------------------------------------------------------------------------
# Backward pass and finite-difference audit
# ---------------------------------------------------------------------------

def backward_pass(tape: ComputationTape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Propagate d(loss)/d(.) through ``tape`` in reverse recording order.

    Args:
        tape: tape the loss was computed under
        loss: single-element tensor produced on that tape

    Returns:
        dict: tensor id -> gradient array (same shape as the tensor)

    Raises:
        TapeError: if the loss is not scalar or was not produced on the tape
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise TapeError("loss was not produced on this tape (was the tape active and the input watched?)")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=loss.dtype)}
    for node in reversed(tape.nodes):
        upstream = grads.get(node.output.id)
        if upstream is None:
            continue
        for tensor, grad in zip(node.inputs, node.backward(upstream)):
            if grad is None or not tensor.requires_grad:
                continue
            if grad.shape != tensor.shape:
                raise TapeError(
                    f"{node.op} produced gradient {grad.shape} for input of shape {tensor.shape}"
                )
            previous = grads.get(tensor.id)
            grads[tensor.id] = grad if previous is None else previous + grad

    tape.gradients = grads
    logger.debug(f"Backward pass over {len(tape.nodes)} nodes reached {len(grads)} tensors")
    return grads


@dataclass
class GradCheckReport:
    max_relative_error: float
    failing_index: Optional[Tuple[int, ...]]
    checked: int
    threshold: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(self.max_relative_error < self.threshold)


def check_coordinates(size: int, max_coordinates: int = 256, sample_size: int = 64, seed: int = 0) -> np.ndarray:
    """Flat indices visited by finite_diff_check for a point with ``size`` entries."""
    if size <= max_coordinates:
        return np.arange(size)
    rng = np.random.default_rng(seed)
    return rng.choice(size, size=min(sample_size, size), replace=False)


def finite_diff_check(
    function: Callable[[Tensor], Tensor],
    point: Union[Tensor, np.ndarray],
    epsilon: float = 1e-4,
    threshold: float = 1e-4,
    max_coordinates: int = 256,
    sample_size: int = 64,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare tape gradients with central differences in double precision.

    Every coordinate is checked when the point has at most
    ``max_coordinates`` entries; otherwise a seeded random subset of
    ``sample_size`` coordinates is used.
    """
    if not 1e-6 <= epsilon <= 1e-2:
        raise ValueError(f"epsilon must lie in [1e-6, 1e-2], got {epsilon}")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    x = Tensor(base, requires_grad=True, dtype=np.float64)
    with ComputationTape() as tape:
        value = function(x)
    backward_pass(tape, value)
    analytic = tape.grad_array(x)

    coordinates = check_coordinates(base.size, max_coordinates, sample_size, seed)

    worst, worst_index = 0.0, None
    for flat_index in coordinates:
        index = np.unravel_index(int(flat_index), base.shape)
        shifted = base.copy()
        shifted[index] += epsilon
        upper = function(Tensor._wrap(shifted.copy())).item()
        shifted[index] -= 2 * epsilon
        lower = function(Tensor._wrap(shifted)).item()
        numeric = (upper - lower) / (2 * epsilon)
        exact = float(analytic[index])
        error = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
        if error > worst or worst_index is None:
            worst, worst_index = error, tuple(int(i) for i in index)

    report = GradCheckReport(worst, worst_index, len(coordinates), threshold)
    logger.debug(f"Finite-difference check: {report.checked} coords, max rel err {worst:.3e}")
    return report
