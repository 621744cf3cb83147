#!/usr/bin/env python3
"""
🧊 TENSOR CORE
Dense tensors and reverse-mode automatic differentiation for 3D video networks.

This module provides:
- Tensor: a numpy-backed value with an optional gradient tape
- conv3d, batchnorm3d, relu, max_pool3d, global_avg_pool, linear
- add / scale / mul / sum_all, the glue the loss functions compose
- backward(): exact reverse-mode gradients collected in a GradientRecord
- the "PTNS" tensor binary format
"""

import struct
from contextlib import contextmanager
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DEFAULT_DTYPE = np.float32

PTNS_MAGIC = b"PTNS"
PTNS_VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation"""


class GraphError(RuntimeError):
    """backward() was asked for something the tape cannot deliver"""


class FormatError(ValueError):
    """A binary artifact does not follow its declared layout"""


class Mode(str, Enum):
    TRAIN = "train"
    EVAL = "eval"


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(dtype: Union[str, type]):
    """Temporarily switch the dtype used for new tensors ("f32" or "f64")."""
    global _DEFAULT_DTYPE
    lookup = {"f32": np.float32, "f64": np.float64}
    chosen = lookup.get(dtype, dtype) if isinstance(dtype, str) else dtype
    if np.dtype(chosen) not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported precision {dtype!r}")
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(chosen).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """Dense row-major array plus the bookkeeping reverse-mode AD needs"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        array = np.asarray(data)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(_DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(array)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._ctx: Optional["Function"] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype} requires_grad={self.requires_grad}>"


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    """Build a tensor in the current default precision."""
    return Tensor(np.asarray(data, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad, name=name)


class Function:
    """One recorded operation: forward on arrays, backward to parent gradients"""

    def __init__(self, *parents: Tensor):
        self.parents = parents
        self.needs_grad = tuple(p.requires_grad for p in parents)

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        ctx = cls(*inputs)
        out = ctx.forward(*[t.data for t in inputs], **kwargs)
        requires_grad = any(ctx.needs_grad)
        result = Tensor(out, requires_grad=requires_grad)
        if requires_grad:
            result._ctx = ctx
        return result

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


class GradientRecord:
    """Gradients keyed by tensor identity, accumulated additively"""

    def __init__(self):
        self._grads: Dict[int, np.ndarray] = {}
        self._tensors: Dict[int, Tensor] = {}

    def accumulate(self, target: Tensor, grad: np.ndarray):
        if grad.shape != target.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match parameter shape {target.shape}")
        key = id(target)
        if key in self._grads:
            self._grads[key] = self._grads[key] + grad
        else:
            self._grads[key] = np.array(grad, dtype=target.dtype, copy=True)
            self._tensors[key] = target

    def get(self, target: Tensor, default=None) -> Optional[np.ndarray]:
        return self._grads.get(id(target), default)

    def __getitem__(self, target: Tensor) -> np.ndarray:
        key = id(target)
        if key not in self._grads:
            raise KeyError(f"no gradient recorded for {target!r}")
        return self._grads[key]

    def __contains__(self, target: Tensor) -> bool:
        return id(target) in self._grads

    def __len__(self) -> int:
        return len(self._grads)

    def items(self) -> Iterator[Tuple[Tensor, np.ndarray]]:
        for key, grad in self._grads.items():
            yield self._tensors[key], grad


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, record: Optional[GradientRecord] = None) -> GradientRecord:
    """Reverse-mode sweep from a scalar loss to every leaf that requires grad."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached: no parameter that requires grad reaches it")

    record = record if record is not None else GradientRecord()
    pending: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}

    for node in reversed(_topological_order(loss)):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            record.accumulate(node, grad)
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + parent_grad if key in pending else parent_grad
    return record


# ---------------------------------------------------------------------------
# Elementwise glue
# ---------------------------------------------------------------------------

def _require_same_shape(op: str, a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


class Add(Function):
    def forward(self, a, b):
        _require_same_shape("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        _require_same_shape("mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a, factor):
        self.factor = a.dtype.type(factor)
        return a * self.factor

    def backward(self, grad):
        return (grad * self.factor,)


class SumAll(Function):
    def forward(self, a):
        self.input_shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.full(self.input_shape, grad.reshape(()), dtype=grad.dtype),)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, x.dtype.type(0))

    def backward(self, grad):
        return (np.where(self.mask, grad, grad.dtype.type(0)),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def sum_all(a: Tensor) -> Tensor:
    return SumAll.apply(a)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


# ---------------------------------------------------------------------------
# Affine head and pooling
# ---------------------------------------------------------------------------

class Linear(Function):
    def forward(self, x, w, b):
        if x.ndim != 2 or w.ndim != 2 or b.ndim != 1:
            raise ShapeError(f"linear expects N×d, d×n, n; got {x.shape}, {w.shape}, {b.shape}")
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear: input width {x.shape[1]} does not match weight rows {w.shape[0]}")
        if b.shape[0] != w.shape[1]:
            raise ShapeError(f"linear: bias length {b.shape[0]} does not match weight columns {w.shape[1]}")
        self.x, self.w = x, w
        return x @ w + b

    def backward(self, grad):
        return grad @ self.w.T, self.x.T @ grad, grad.sum(axis=0)


class GlobalAvgPool(Function):
    def forward(self, x):
        if x.ndim != 5:
            raise ShapeError(f"global_avg_pool expects N×C×T×H×W, got {x.shape}")
        self.input_shape = x.shape
        self.count = x.shape[2] * x.shape[3] * x.shape[4]
        return x.mean(axis=(2, 3, 4))

    def backward(self, grad):
        share = grad / grad.dtype.type(self.count)
        return (np.broadcast_to(share[:, :, None, None, None], self.input_shape).copy(),)


def linear(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weights, bias)


def global_avg_pool(x: Tensor) -> Tensor:
    return GlobalAvgPool.apply(x)


# ---------------------------------------------------------------------------
# 3D convolution
# ---------------------------------------------------------------------------

def _triple(value) -> Tuple[int, int, int]:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"expected 3 values, got {value}")
    return value


def output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _output_extents(spatial, kernel, stride, padding, op: str) -> Tuple[int, int, int]:
    extents = tuple(output_extent(s, k, st, p) for s, k, st, p in zip(spatial, kernel, stride, padding))
    if any(e <= 0 for e in extents):
        raise ShapeError(
            f"{op}: non-positive output extent {extents} for input {tuple(spatial)}, "
            f"kernel {tuple(kernel)}, stride {tuple(stride)}, padding {tuple(padding)}"
        )
    return extents


def _window(offset: int, stride: int, count: int) -> slice:
    return slice(offset, offset + stride * (count - 1) + 1, stride)


def _patches(xp: np.ndarray, kernel, stride, extents) -> np.ndarray:
    """Strided view N×C×T'×H'×W'×kt×kh×kw of every kernel window (no copy)."""
    windows = sliding_window_view(xp, tuple(kernel), axis=(2, 3, 4))
    return windows[:, :, :stride[0] * (extents[0] - 1) + 1:stride[0],
                   :stride[1] * (extents[1] - 1) + 1:stride[1],
                   :stride[2] * (extents[2] - 1) + 1:stride[2]]


class Conv3d(Function):
    """Cross-correlation over T×H×W as one im2col contraction"""

    def forward(self, x, w, *bias, stride, padding):
        if x.ndim != 5 or w.ndim != 5:
            raise ShapeError(f"conv3d expects N×C×T×H×W input and K×C×kt×kh×kw kernel, got {x.shape}, {w.shape}")
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"conv3d: input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
        if bias and bias[0].shape != (w.shape[0],):
            raise ShapeError(f"conv3d: bias shape {bias[0].shape} does not match {w.shape[0]} output channels")

        kernel = w.shape[2:]
        extents = _output_extents(x.shape[2:], kernel, stride, padding, "conv3d")
        pt, ph, pw = padding
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if any(padding) else x

        # N×T'×H'×W'×K
        out = np.tensordot(_patches(xp, kernel, stride, extents), w, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
        out = out.transpose(0, 4, 1, 2, 3)
        if bias:
            out = out + bias[0][None, :, None, None, None]
        self.xp, self.w = xp, w
        self.input_shape = x.shape
        self.stride, self.padding = stride, padding
        self.out_extents = extents
        return np.ascontiguousarray(out, dtype=x.dtype)

    def backward(self, grad):
        xp, w = self.xp, self.w
        out_t, out_h, out_w = self.out_extents
        stride = self.stride
        want_x, want_w = self.needs_grad[0], self.needs_grad[1]

        grad_w = None
        if want_w:
            patches = _patches(xp, w.shape[2:], stride, self.out_extents)
            grad_w = np.ascontiguousarray(np.tensordot(grad, patches, axes=([0, 2, 3, 4], [0, 2, 3, 4])), dtype=w.dtype)

        grad_x = None
        if want_x:
            # N×T'×H'×W'×C×kt×kh×kw, scattered back window by window (col2im)
            cols = np.tensordot(grad, w, axes=([1], [0]))
            grad_xp = np.zeros_like(xp)
            for dt in range(w.shape[2]):
                for dh in range(w.shape[3]):
                    for dw in range(w.shape[4]):
                        window = (slice(None), slice(None), _window(dt, stride[0], out_t),
                                  _window(dh, stride[1], out_h), _window(dw, stride[2], out_w))
                        grad_xp[window] += cols[..., dt, dh, dw].transpose(0, 4, 1, 2, 3)
            _, _, t, h, wd = self.input_shape
            pt, ph, pw = self.padding
            grad_x = np.ascontiguousarray(grad_xp[:, :, pt:pt + t, ph:ph + h, pw:pw + wd])
        grads = [grad_x, grad_w]
        if len(self.parents) == 3:
            grads.append(grad.sum(axis=(0, 2, 3, 4)))
        return tuple(grads)


def conv3d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride=1, padding=0) -> Tensor:
    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return Conv3d.apply(*inputs, stride=_triple(stride), padding=_triple(padding))


def conv3d_reference(x: np.ndarray, kernel: np.ndarray, bias: Optional[np.ndarray] = None,
                     stride=1, padding=0) -> np.ndarray:
    """Direct windowed-sum loops; the oracle the im2col path is checked against."""
    stride, padding = _triple(stride), _triple(padding)
    n, c, t, h, wd = x.shape
    k, kc, kt, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"conv3d: input has {c} channels, kernel expects {kc}")
    out_t, out_h, out_w = _output_extents((t, h, wd), (kt, kh, kw), stride, padding, "conv3d")
    pt, ph, pw = padding
    xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    out = np.zeros((n, k, out_t, out_h, out_w), dtype=x.dtype)
    for b in range(n):
        for o in range(k):
            for i in range(out_t):
                for j in range(out_h):
                    for m in range(out_w):
                        ts, hs, ws = i * stride[0], j * stride[1], m * stride[2]
                        window = xp[b, :, ts:ts + kt, hs:hs + kh, ws:ws + kw]
                        out[b, o, i, j, m] = np.sum(window * kernel[o])
            if bias is not None:
                out[b, o] += bias[o]
    return out


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------

class MaxPool3d(Function):
    def forward(self, x, kernel, stride, padding):
        if x.ndim != 5:
            raise ShapeError(f"max_pool3d expects N×C×T×H×W, got {x.shape}")
        extents = _output_extents(x.shape[2:], kernel, stride, padding, "max_pool3d")
        pt, ph, pw = padding
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)), constant_values=-np.inf)

        best = None
        winner = np.zeros(x.shape[:2] + extents, dtype=np.int32)
        offset = 0
        for dt in range(kernel[0]):
            for dh in range(kernel[1]):
                for dw in range(kernel[2]):
                    patch = xp[:, :, _window(dt, stride[0], extents[0]), _window(dh, stride[1], extents[1]),
                               _window(dw, stride[2], extents[2])]
                    if best is None:
                        best = patch.copy()
                    else:
                        better = patch > best
                        best = np.where(better, patch, best)
                        winner = np.where(better, offset, winner)
                    offset += 1

        self.padded_shape = xp.shape
        self.input_shape = x.shape
        self.kernel, self.stride, self.padding, self.extents = kernel, stride, padding, extents
        self.winner = winner
        return best

    def backward(self, grad):
        grad_xp = np.zeros(self.padded_shape, dtype=grad.dtype)
        offset = 0
        for dt in range(self.kernel[0]):
            for dh in range(self.kernel[1]):
                for dw in range(self.kernel[2]):
                    window = (slice(None), slice(None), _window(dt, self.stride[0], self.extents[0]),
                              _window(dh, self.stride[1], self.extents[1]), _window(dw, self.stride[2], self.extents[2]))
                    grad_xp[window] += np.where(self.winner == offset, grad, grad.dtype.type(0))
                    offset += 1
        _, _, t, h, w = self.input_shape
        pt, ph, pw = self.padding
        return (np.ascontiguousarray(grad_xp[:, :, pt:pt + t, ph:ph + h, pw:pw + w]),)


def max_pool3d(x: Tensor, kernel=3, stride=2, padding=1) -> Tensor:
    return MaxPool3d.apply(x, kernel=_triple(kernel), stride=_triple(stride), padding=_triple(padding))


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------

_BN_AXES = (0, 2, 3, 4)


def _per_channel(v: np.ndarray) -> np.ndarray:
    return v[None, :, None, None, None]


class BatchNorm3d(Function):
    def forward(self, x, scale_, shift, *, mean, var, eps, training):
        self.inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
        self.xhat = (x - _per_channel(mean.astype(x.dtype))) * _per_channel(self.inv_std)
        self.scale_ = scale_
        self.training = training
        self.count = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        return self.xhat * _per_channel(scale_) + _per_channel(shift)

    def backward(self, grad):
        xhat = self.xhat
        grad_scale = (grad * xhat).sum(axis=_BN_AXES)
        grad_shift = grad.sum(axis=_BN_AXES)
        grad_xhat = grad * _per_channel(self.scale_)
        if self.training:
            m = grad.dtype.type(self.count)
            grad_x = _per_channel(self.inv_std) / m * (
                m * grad_xhat
                - _per_channel(grad_xhat.sum(axis=_BN_AXES))
                - xhat * _per_channel((grad_xhat * xhat).sum(axis=_BN_AXES))
            )
        else:
            grad_x = grad_xhat * _per_channel(self.inv_std)
        return grad_x, grad_scale, grad_shift


def batchnorm3d(x: Tensor, scale_: Tensor, shift: Tensor, eps: float = 1e-5, mode: Union[Mode, str] = Mode.TRAIN,
                running_mean: Optional[Tensor] = None, running_var: Optional[Tensor] = None,
                momentum: float = 0.1, update_stats: bool = True) -> Tensor:
    """Per-channel normalisation over N×T×H×W.

    Train mode uses the batch population variance and, when running buffers are
    supplied and update_stats is set, moves them by `momentum`. Eval mode reads the
    running buffers.
    """
    mode = Mode(mode)
    if x.ndim != 5:
        raise ShapeError(f"batchnorm3d expects N×C×T×H×W, got {x.shape}")
    channels = x.shape[1]
    if scale_.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(f"batchnorm3d: scale/shift must have shape ({channels},), got {scale_.shape}, {shift.shape}")

    if mode is Mode.TRAIN:
        count = x.shape[0] * x.shape[2] * x.shape[3] * x.shape[4]
        if count < 2:
            raise ShapeError("batchnorm3d in train mode needs at least 2 elements per channel")
        mean = x.data.mean(axis=_BN_AXES)
        var = x.data.var(axis=_BN_AXES)
        if update_stats and running_mean is not None and running_var is not None:
            rm, rv = running_mean.data, running_var.data
            running_mean.data = ((1.0 - momentum) * rm + momentum * mean).astype(rm.dtype)
            running_var.data = ((1.0 - momentum) * rv + momentum * var * count / (count - 1)).astype(rv.dtype)
    else:
        if running_mean is None or running_var is None:
            raise ShapeError("batchnorm3d in eval mode needs running statistics")
        mean, var = running_mean.data, running_var.data

    return BatchNorm3d.apply(x, scale_, shift, mean=mean, var=var, eps=eps, training=mode is Mode.TRAIN)


# ---------------------------------------------------------------------------
# PTNS binary format
# ---------------------------------------------------------------------------

def write_tensor(fh: BinaryIO, array) -> None:
    array = np.asarray(array.data if isinstance(array, Tensor) else array)
    codes = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
    if array.dtype not in codes:
        raise FormatError(f"PTNS stores f32/f64 only, got {array.dtype}")
    code = codes[array.dtype]
    fh.write(PTNS_MAGIC)
    fh.write(struct.pack("<BBH", PTNS_VERSION, code, array.ndim))
    fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes(order="C"))


def _read_exact(fh: BinaryIO, count: int, what: str) -> bytes:
    chunk = fh.read(count)
    if len(chunk) != count:
        raise FormatError(f"truncated PTNS data while reading {what}")
    return chunk


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4, "magic")
    if magic != PTNS_MAGIC:
        raise FormatError(f"bad PTNS magic {magic!r}")
    version, code, rank = struct.unpack("<BBH", _read_exact(fh, 4, "header"))
    if version != PTNS_VERSION:
        raise FormatError(f"unsupported PTNS version {version}")
    if code not in _DTYPE_CODES:
        raise FormatError(f"unknown PTNS dtype code {code}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "extents")) if rank else ()
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64))
    payload = _read_exact(fh, count * dtype.itemsize, "payload")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def save_tensor(path: Union[str, Path], value) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, value)


def load_tensor(path: Union[str, Path]) -> Tensor:
    with open(path, "rb") as fh:
        return Tensor(read_tensor(fh))
