#!/usr/bin/env python3
"""
Dense NCHW tensors with reverse-mode automatic differentiation

Tensors are immutable values: every op returns a fresh read-only array and
never touches its inputs. Differentiable ops executed inside an active
``Tape`` are recorded; ``Tape.backward`` replays them in reverse and
accumulates (+=) into ``Parameter.grad``.

Reductions go through numpy (pairwise summation, BLAS for contractions), so
results are bitwise reproducible for a fixed BLAS thread count.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, ShapeError, TapeError

logger = logging.getLogger(__name__)

# log() clamps its input here so adversarial terms stay finite when D saturates
LOG_EPS = 1e-12
LEAKY_SLOPE = 0.2

IntPair = Union[int, Tuple[int, int]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _RuntimeState(threading.local):
    """Per-thread autodiff state"""

    def __init__(self):
        self.tapes: List["Tape"] = []
        self.grad_enabled = True
        self.dtype = np.dtype(np.float32)
        self.finite_checks = True
        self.branch_log: Optional[List[np.ndarray]] = None


_state = _RuntimeState()


def get_default_dtype() -> np.dtype:
    """Floating point type used for new tensors on this thread"""
    return _state.dtype


def set_default_dtype(dtype) -> None:
    """Set the floating point type for new tensors on this thread"""
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"Unsupported dtype: {dtype}")
    _state.dtype = dtype


@contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the default dtype (gradient checks use float64)"""
    previous = _state.dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording on this thread"""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def set_finite_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check on op outputs"""
    _state.finite_checks = enabled


@contextmanager
def record_branches() -> Iterator[List[np.ndarray]]:
    """Collect the branch pattern of every piecewise op run on this thread

    ReLU masks, pooling winners, L1 signs and log clamps are appended in
    execution order. Two evaluations with equal logs lie on the same linear
    piece of the graph.
    """
    previous = _state.branch_log
    log: List[np.ndarray] = []
    _state.branch_log = log
    try:
        yield log
    finally:
        _state.branch_log = previous


def _note_branch(pattern: np.ndarray) -> None:
    if _state.branch_log is not None:
        _state.branch_log.append(pattern)


def _current_tape() -> Optional["Tape"]:
    if not _state.grad_enabled or not _state.tapes:
        return None
    return _state.tapes[-1]


class Tensor:
    """Immutable n-dimensional array that may participate in a tape"""

    __slots__ = ("data", "requires_grad", "param")

    def __init__(self, data, requires_grad: bool = False, dtype=None, param: Optional["Parameter"] = None):
        arr = np.array(data, dtype=get_default_dtype() if dtype is None else dtype)
        if any(dim < 1 for dim in arr.shape):
            raise ShapeError(f"All shape components must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.param = param

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        """Wrap an op result without copying"""
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.param = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array"""
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, neg(other))
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """Trainable tensor with a gradient buffer and a hierarchical name"""

    def __init__(self, data, name: str = "", dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype.kind == "f" else get_default_dtype()
        self.name = name
        self._value = Tensor(arr, requires_grad=True, dtype=dtype, param=self)
        self.grad = np.zeros(self._value.shape, dtype=self._value.dtype)

    @property
    def value(self) -> Tensor:
        return self._value

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._value.shape

    @property
    def dtype(self) -> np.dtype:
        return self._value.dtype

    @property
    def size(self) -> int:
        return self._value.size

    def assign(self, data) -> None:
        """Replace the value with a new array of the same shape"""
        arr = np.asarray(data)
        if arr.shape != self.shape:
            raise ShapeError(f"Parameter {self.name or '?'}: shape {arr.shape} != {self.shape}")
        self._value = Tensor(arr, requires_grad=True, dtype=self.dtype, param=self)

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.shape, dtype=self.dtype)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of differentiable ops for a single reverse pass"""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._used = False

    def __enter__(self) -> "Tape":
        if self._used:
            raise TapeError("Tape already consumed by backward(); record a fresh forward")
        _state.tapes.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        if _state.tapes and _state.tapes[-1] is self:
            _state.tapes.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        if self._used:
            raise TapeError("Tape is single-use")
        self._nodes.append(_Node(out, inputs, backward))

    def backward(self, loss: Tensor, wrt: Optional[Iterable["Parameter"]] = None) -> None:
        """Accumulate d(loss)/d(param) into Parameter.grad

        When ``wrt`` is given only those parameters receive gradient.
        """
        if self._used:
            raise TapeError("backward() called twice on the same tape")
        if loss.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._used = True
        if not loss.requires_grad:
            self._nodes = []
            return

        allowed = None if wrt is None else {id(p) for p in wrt}
        grads: Dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}

        for node in reversed(self._nodes):
            upstream = grads.pop(id(node.out), None)
            if upstream is None:
                continue
            for tensor, grad in zip(node.inputs, node.backward(upstream)):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.param is not None:
                    if allowed is None or id(tensor.param) in allowed:
                        tensor.param.grad += grad
                    continue
                key = id(tensor)
                grads[key] = grads[key] + grad if key in grads else grad

        self._nodes = []


def backward(tape: Tape, loss: Tensor, wrt: Optional[Iterable[Parameter]] = None) -> None:
    """Run the reverse pass of ``tape`` from ``loss``"""
    tape.backward(loss, wrt)


def _emit(arr: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if _state.finite_checks and not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values (training diverged?)")
    tape = _current_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs_grad)
    if needs_grad:
        tape.record(out, inputs, backward_fn)
    return out


def _recording(*inputs: Tensor) -> bool:
    return _current_tape() is not None and any(t.requires_grad for t in inputs)


def _pair(value: IntPair) -> Tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _same_shape(x: Tensor, y: Tensor, op: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: shape mismatch {x.shape} vs {y.shape}")


def _require_4d(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a 4-D NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------- convolution

def conv_output_size(size: int, kernel: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           pad: IntPair = 0, dilation: IntPair = 1) -> Tensor:
    """2-D cross-correlation with zero padding (NCHW, OIHW weights)"""
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (c_out, c_in, kh, kw), got {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, w_in, kh, kw = weight.shape
    if c_in != w_in:
        raise ShapeError(f"conv2d: channel mismatch, input has {c_in}, weight expects {w_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    ph, pw = _pair(pad)
    dh, dw = _pair(dilation)
    stride = int(stride)
    if stride < 1 or dh < 1 or dw < 1 or ph < 0 or pw < 0:
        raise ValueError(f"conv2d: invalid stride={stride} pad={(ph, pw)} dilation={(dh, dw)}")
    oh = conv_output_size(h, kh, stride, ph, dh)
    ow = conv_output_size(w, kw, stride, pw, dw)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: output dimension < 1 for input {x.shape} and kernel {weight.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    wt = weight.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    if not _recording(*inputs):
        # Tap accumulation keeps inference memory at one input-sized slice
        out = np.zeros((n, c_out, oh, ow), dtype=np.result_type(xp, wt))
        for i in range(kh):
            for j in range(kw):
                window = xp[:, :, i * dh:i * dh + stride * (oh - 1) + 1:stride,
                            j * dw:j * dw + stride * (ow - 1) + 1:stride]
                out += np.tensordot(wt[:, :, i, j], window, axes=([1], [1])).transpose(1, 0, 2, 3)
        if bias is not None:
            out += bias.data[None, :, None, None]
        return _emit(out, inputs, None, "conv2d")

    span_h = dh * (kh - 1) + 1
    span_w = dw * (kw - 1) + 1
    cols = sliding_window_view(xp, (span_h, span_w), axis=(2, 3))[:, :, ::stride, ::stride, ::dh, ::dw]
    out = np.tensordot(cols, wt, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def _backward(g: np.ndarray):
        grad_x = None
        if x.requires_grad:
            gcols = np.tensordot(g, wt, axes=([1], [0]))  # (n, oh, ow, c_in, kh, kw)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i * dh:i * dh + stride * (oh - 1) + 1:stride,
                        j * dw:j * dw + stride * (ow - 1) + 1:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad_x = gxp[:, :, ph:ph + h, pw:pw + w]
        grad_w = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if weight.requires_grad else None
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 2, 3))

    return _emit(out, inputs, _backward, "conv2d")


# ---------------------------------------------------------------- activations

def leaky_relu(x: Tensor, alpha: float = LEAKY_SLOPE) -> Tensor:
    """max(x, alpha*x); the kink at 0 takes the negative-branch slope"""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {alpha}")
    positive = x.data > 0
    _note_branch(positive)
    out = np.where(positive, x.data, alpha * x.data).astype(x.dtype, copy=False)

    def _backward(g):
        return (np.where(positive, g, alpha * g),)

    return _emit(out, (x,), _backward, "leaky_relu")


def relu(x: Tensor) -> Tensor:
    """max(x, 0); derivative 0 at x == 0"""
    positive = x.data > 0
    _note_branch(positive)
    out = np.where(positive, x.data, 0).astype(x.dtype, copy=False)

    def _backward(g):
        return (g * positive,)

    return _emit(out, (x,), _backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic function"""
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def _backward(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (x,), _backward, "sigmoid")


# ---------------------------------------------------------------- arithmetic

def add(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise sum; either operand may be a 0-d scalar tensor"""
    if x.shape != y.shape and x.ndim != 0 and y.ndim != 0:
        raise ShapeError(f"add: shape mismatch {x.shape} vs {y.shape}")
    out = x.data + y.data
    out_shape = out.shape

    def _reduce(g, shape):
        return g.sum().reshape(shape) if shape != out_shape else g

    def _backward(g):
        return _reduce(g, x.shape), _reduce(g, y.shape)

    return _emit(np.asarray(out), (x, y), _backward, "add")


def neg(x: Tensor) -> Tensor:
    def _backward(g):
        return (-g,)

    return _emit(-x.data, (x,), _backward, "neg")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    out = (x.data * s).astype(x.dtype, copy=False)

    def _backward(g):
        return (g * s,)

    return _emit(out, (x,), _backward, "scale")


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = (x.data + float(c)).astype(x.dtype, copy=False)

    def _backward(g):
        return (g,)

    return _emit(out, (x,), _backward, "add_scalar")


def mul(x: Tensor, y: Tensor) -> Tensor:
    """Elementwise product; either operand may be a 0-d scalar tensor"""
    if x.shape != y.shape and x.ndim != 0 and y.ndim != 0:
        raise ShapeError(f"mul: shape mismatch {x.shape} vs {y.shape}")
    out = np.asarray(x.data * y.data)
    out_shape = out.shape

    def _reduce(g, shape):
        return g.sum().reshape(shape) if shape != out_shape else g

    def _backward(g):
        return _reduce(g * y.data, x.shape), _reduce(g * x.data, y.shape)

    return _emit(out, (x, y), _backward, "mul")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis, order preserved"""
    if not xs:
        raise ShapeError("concat_channels: empty list")
    for t in xs:
        _require_4d(t, "concat_channels")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match n,h,w of {xs[0].shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    bounds = np.cumsum([t.shape[1] for t in xs])[:-1]

    def _backward(g):
        return tuple(np.split(g, bounds, axis=1))

    return _emit(out, tuple(xs), _backward, "concat_channels")


def mean_all(x: Tensor) -> Tensor:
    """Mean over every element, returned as a 0-d tensor"""
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    count = x.size

    def _backward(g):
        return (np.full(x.shape, g / count, dtype=x.dtype),)

    return _emit(out, (x,), _backward, "mean_all")


def mean_spatial(x: Tensor) -> Tensor:
    """Per-channel mean over h and w, shape (n, c, 1, 1)"""
    _require_4d(x, "mean_spatial")
    out = x.data.mean(axis=(2, 3), keepdims=True)
    count = x.shape[2] * x.shape[3]

    def _backward(g):
        return (np.broadcast_to(g / count, x.shape).astype(x.dtype),)

    return _emit(out, (x,), _backward, "mean_spatial")


def l1(x: Tensor, y: Tensor) -> Tensor:
    """Mean absolute difference; subgradient 0 where x == y"""
    _same_shape(x, y, "l1")
    diff = x.data - y.data
    _note_branch(np.sign(diff))
    out = np.asarray(np.abs(diff).mean(), dtype=x.dtype)
    count = x.size

    def _backward(g):
        grad = np.sign(diff) * (g / count)
        return grad, -grad

    return _emit(out, (x, y), _backward, "l1")


def log(x: Tensor) -> Tensor:
    """Natural log with inputs clamped to >= LOG_EPS (zero gradient where clamped)"""
    clamped = np.maximum(x.data, LOG_EPS)
    out = np.log(clamped).astype(x.dtype, copy=False)
    active = x.data >= LOG_EPS
    _note_branch(active)

    def _backward(g):
        return (np.where(active, g / clamped, 0.0).astype(x.dtype, copy=False),)

    return _emit(out, (x,), _backward, "log")


def detach(x: Tensor) -> Tensor:
    """Same values, cut from any tape"""
    return Tensor._wrap(x.data, requires_grad=False)


# ---------------------------------------------------------------- resampling

def nearest_upsample(x: Tensor, r: int) -> Tensor:
    """Replicate every pixel into an r x r block"""
    _require_4d(x, "nearest_upsample")
    if r < 2:
        raise ValueError(f"nearest_upsample factor must be >= 2, got {r}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, r, axis=2), r, axis=3)

    def _backward(g):
        return (g.reshape(n, c, h, r, w, r).sum(axis=(3, 5)),)

    return _emit(out, (x,), _backward, "nearest_upsample")


def _shuffle(arr: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = arr.shape
    c_out = c // (r * r)
    return arr.reshape(n, c_out, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, c_out, h * r, w * r)


def _unshuffle(arr: np.ndarray, r: int) -> np.ndarray:
    n, c, h, w = arr.shape
    return arr.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Periodic shuffle (n, c*r^2, h, w) -> (n, c, h*r, w*r)"""
    _require_4d(x, "pixel_shuffle")
    if r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"pixel_shuffle: {x.shape[1]} channels not divisible by r^2={r * r}")
    out = np.ascontiguousarray(_shuffle(x.data, r))

    def _backward(g):
        return (_unshuffle(g, r),)

    return _emit(out, (x,), _backward, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of pixel_shuffle: (n, c, h*r, w*r) -> (n, c*r^2, h, w)"""
    _require_4d(x, "pixel_unshuffle")
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"pixel_unshuffle: spatial dims {x.shape[2:]} not divisible by {r}")
    out = np.ascontiguousarray(_unshuffle(x.data, r))

    def _backward(g):
        return (_shuffle(g, r),)

    return _emit(out, (x,), _backward, "pixel_unshuffle")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; ties go to the first element in raster order"""
    _require_4d(x, "max_pool2d")
    n, c, h, w = x.shape
    oh, ow = h // k, w // k
    if oh < 1 or ow < 1:
        raise ShapeError(f"max_pool2d: input {x.shape} smaller than window {k}")
    blocks = x.data[:, :, :oh * k, :ow * k].reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, oh, ow, k * k)
    winner = blocks.argmax(axis=-1)
    _note_branch(winner)
    out = np.take_along_axis(blocks, winner[..., None], axis=-1)[..., 0]

    def _backward(g):
        onehot = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(onehot, winner[..., None], g[..., None], axis=-1)
        grad = onehot.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * k, ow * k)
        if (oh * k, ow * k) != (h, w):
            grad = np.pad(grad, ((0, 0), (0, 0), (0, h - oh * k), (0, w - ow * k)))
        return (grad,)

    return _emit(np.ascontiguousarray(out), (x,), _backward, "max_pool2d")


# ---------------------------------------------------------------- oracle

def finite_diff_grad(f: Callable[[], Tensor], p: Parameter, h: float = 1e-5,
                     indices: Optional[Sequence[Tuple[int, ...]]] = None) -> np.ndarray:
    """Central differences (f(p+h) - f(p-h)) / 2h for each element of ``p``

    ``f`` re-runs the graph and returns a scalar. Elements outside
    ``indices`` (when given) are left as NaN. Requires a float64 parameter.
    """
    if p.dtype != np.float64:
        raise ValueError("finite differences run in 64-bit mode")
    original = np.array(p.value.data)
    grad = np.full(original.shape, np.nan)
    targets = list(np.ndindex(original.shape)) if indices is None else [tuple(i) for i in indices]
    try:
        with no_grad():
            for idx in targets:
                shifted = original.copy()
                shifted[idx] += h
                p.assign(shifted)
                upper = f().item()
                shifted[idx] = original[idx] - h
                p.assign(shifted)
                lower = f().item()
                grad[idx] = (upper - lower) / (2.0 * h)
    finally:
        p.assign(original)
    return grad
