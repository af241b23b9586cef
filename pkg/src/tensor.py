#!/usr/bin/env python3
"""
Dense float64 tensors with reverse-mode automatic differentiation.
Every layer in the toolkit is composed from the primitives defined here.
"""

import itertools
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    from .errors import ContractError, DimensionError, ConfigurationError, NumericError
except ImportError:
    from errors import ContractError, DimensionError, ConfigurationError, NumericError

DTYPE = np.float64


class OpKind(Enum):
    """Primitive operations that can appear on the tape."""
    ADD = "add"
    SUB = "sub"
    MUL = "mul"
    DIV = "div"
    NEG = "neg"
    MATMUL = "matmul"
    TANH = "tanh"
    RELU = "relu"
    EXP = "exp"
    LOG = "log"
    SQRT = "sqrt"
    ABS = "abs"
    WHERE = "where"
    CONCAT = "concat"
    RESHAPE = "reshape"
    TRANSPOSE = "transpose"
    GETITEM = "getitem"
    SUM = "sum"
    MEAN = "mean"
    SOFTMAX = "softmax"
    CONV2D = "conv2d"


@dataclass
class TapeNode:
    """One recorded primitive application."""
    op_kind: OpKind
    inputs: Tuple['Tensor', ...]
    saved_ctx: Dict[str, Any]
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    tape_id: int = field(default_factory=lambda: next(_TAPE_COUNTER))


# Creation order of nodes is a topological order of every forward pass.
_TAPE_COUNTER = itertools.count()
_GRAD_STATE = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_GRAD_STATE, 'enabled', True)


class no_grad:
    """Context manager that stops primitives from recording tape nodes."""

    def __enter__(self):
        self._previous = is_grad_enabled()
        _GRAD_STATE.enabled = False
        return self

    def __exit__(self, exc_type, exc, tb):
        _GRAD_STATE.enabled = self._previous
        return False


class Tensor:
    """n-dimensional float64 array with an optional gradient slot."""

    # ndarray (op) Tensor must reach the reflected Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[TapeNode] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'Tensor':
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.requires_grad = False
        out.grad = None
        out._node = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def tape_id(self) -> Optional[int]:
        return self._node.tape_id if self._node is not None else None

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> 'Tensor':
        return Tensor._wrap(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'Tensor':
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'Tensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'Tensor':
        return transpose(self, axes if axes else None)

    def tanh(self) -> 'Tensor':
        return tanh(self)

    def relu(self) -> 'Tensor':
        return relu(self)

    def exp(self) -> 'Tensor':
        return exp(self)

    def log(self) -> 'Tensor':
        return log(self)

    def abs(self) -> 'Tensor':
        return absolute(self)


TensorLike = Union[Tensor, np.ndarray, float, int, List]


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=DTYPE), requires_grad=requires_grad)


def _as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=DTYPE))


def _record(data: np.ndarray, op_kind: OpKind, inputs: Sequence[Tensor],
            backward_fn: Callable, **saved_ctx) -> Tensor:
    """Wrap a forward result and put a node on the tape when any input tracks gradients."""
    out = Tensor._wrap(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = TapeNode(op_kind=op_kind, inputs=tuple(inputs), saved_ctx=saved_ctx,
                             backward_fn=backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, name: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} do not broadcast")


# Elementwise arithmetic

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "add")
    return _record(a.data + b.data, OpKind.ADD, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _record(a.data - b.data, OpKind.SUB, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _record(a.data * b.data, OpKind.MUL, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a, b, "div")
    return _record(a.data / b.data, OpKind.DIV, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, OpKind.NEG, (a,), lambda g: (-g,))


def tanh(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, OpKind.TANH, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), OpKind.RELU, (a,), lambda g: (g * mask,))


def exp(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)
    return _record(y, OpKind.EXP, (a,), lambda g: (g * y,))


def log(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    return _record(np.log(a.data), OpKind.LOG, (a,), lambda g: (g / a.data,))


def sqrt(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    y = np.sqrt(a.data)
    return _record(y, OpKind.SQRT, (a,), lambda g: (g / (2.0 * y),))


def absolute(a: TensorLike) -> Tensor:
    a = _as_tensor(a)
    return _record(np.abs(a.data), OpKind.ABS, (a,), lambda g: (g * np.sign(a.data),))


def where(condition: np.ndarray, a: TensorLike, b: TensorLike) -> Tensor:
    """Select from `a` where condition holds, else from `b`. The condition is a constant."""
    a, b = _as_tensor(a), _as_tensor(b)
    condition = np.asarray(condition, dtype=bool)
    return _record(np.where(condition, a.data, b.data), OpKind.WHERE, (a, b),
                   lambda g: (_unbroadcast(np.where(condition, g, 0.0), a.shape),
                              _unbroadcast(np.where(condition, 0.0, g), b.shape)))


# Contractions and structure

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(np.matmul(a.data, b.data), OpKind.MATMUL, (a, b), backward_fn)


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: {e}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _record(data, OpKind.CONCAT, tensors,
                   lambda g: tuple(np.split(g, splits, axis=axis)), sizes=sizes, axis=axis)


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {tuple(shape)}")
    return _record(data, OpKind.RESHAPE, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: TensorLike, start_axis: int = 0) -> Tensor:
    """Collapse every axis from `start_axis` on into one."""
    a = _as_tensor(a)
    return reshape(a, a.shape[:start_axis] + (-1,))


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), OpKind.TRANSPOSE, (a,),
                   lambda g: (np.transpose(g, inverse),))


def getitem(a: TensorLike, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = _as_tensor(a)

    def backward_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], OpKind.GETITEM, (a,), backward_fn)


def _expand_reduced(g: np.ndarray, shape: Tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data.sum(axis=axis, keepdims=keepdims), OpKind.SUM, (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),))


def reduce_mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out.size, 1)
    return _record(out, OpKind.MEAN, (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


def softmax(a: TensorLike, axis: int = -1) -> Tensor:
    """Softmax along `axis`, computed with max subtraction."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record(y, OpKind.SOFTMAX, (a,),
                   lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# Convolution

def conv_output_geometry(height: int, width: int, kernel_h: int, kernel_w: int,
                         stride: Tuple[int, int], padding: str) -> Tuple[int, int, Tuple[int, int, int, int]]:
    """Output spatial size and (top, bottom, left, right) padding for a convolution."""
    sy, sx = stride
    if sy < 1 or sx < 1:
        raise ConfigurationError(f"conv2d stride must be >= 1, got {stride}")
    if padding == 'same':
        out_h, out_w = -(-height // sy), -(-width // sx)
        pad_h = max((out_h - 1) * sy + kernel_h - height, 0)
        pad_w = max((out_w - 1) * sx + kernel_w - width, 0)
        return out_h, out_w, (pad_h // 2, pad_h - pad_h // 2, pad_w // 2, pad_w - pad_w // 2)
    if padding == 'valid':
        if kernel_h > height or kernel_w > width:
            raise DimensionError(f"conv2d kernel {kernel_h}x{kernel_w} larger than input {height}x{width}")
        return (height - kernel_h) // sy + 1, (width - kernel_w) // sx + 1, (0, 0, 0, 0)
    raise ConfigurationError(f"conv2d padding must be 'same' or 'valid', got '{padding}'")


def conv2d(x: TensorLike, kernels: TensorLike, bias: Optional[TensorLike] = None,
           stride: Tuple[int, int] = (1, 1), padding: str = 'same') -> Tensor:
    """2-D convolution of an H×W×C (or batched B×H×W×C) input with Hk×Wk×C×C' kernels."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    unbatched = x.ndim == 3
    if unbatched:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernels.ndim != 4:
        raise DimensionError(f"conv2d expects H×W×C input and Hk×Wk×C×C' kernels, got {x.shape}, {kernels.shape}")
    if x.shape[-1] != kernels.shape[2]:
        raise DimensionError(f"conv2d: input has {x.shape[-1]} channels, kernels expect {kernels.shape[2]}")
    inputs = [x, kernels]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (kernels.shape[3],):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({kernels.shape[3]},)")
        inputs.append(bias)

    batch, height, width, _ = x.shape
    kernel_h, kernel_w, _, out_channels = kernels.shape
    sy, sx = stride
    out_h, out_w, (top, bottom, left, right) = conv_output_geometry(
        height, width, kernel_h, kernel_w, stride, padding)
    padded = np.pad(x.data, ((0, 0), (top, bottom), (left, right), (0, 0)))
    k = kernels.data

    def window(array, i, j):
        return array[:, i:i + sy * (out_h - 1) + 1:sy, j:j + sx * (out_w - 1) + 1:sx, :]

    out = np.zeros((batch, out_h, out_w, out_channels), dtype=DTYPE)
    for i in range(kernel_h):
        for j in range(kernel_w):
            out += window(padded, i, j) @ k[i, j]
    if bias is not None:
        out += bias.data

    def backward_fn(g):
        grad_padded = np.zeros_like(padded)
        grad_k = np.zeros_like(k)
        for i in range(kernel_h):
            for j in range(kernel_w):
                grad_k[i, j] = np.tensordot(window(padded, i, j), g, axes=([0, 1, 2], [0, 1, 2]))
                window(grad_padded, i, j)[...] += g @ k[i, j].T
        grad_x = grad_padded[:, top:top + height, left:left + width, :]
        grads = [grad_x, grad_k]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return tuple(grads)

    result = _record(out, OpKind.CONV2D, inputs, backward_fn, stride=stride, padding=padding)
    if unbatched:
        result = reshape(result, result.shape[1:])
    return result


# Reverse pass

def backward(loss: Tensor):
    """Accumulate dLoss/dLeaf into every requires_grad leaf reachable from `loss`."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if not loss.requires_grad:
            raise ContractError("backward called on a tensor that is not on the tape")
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    nodes: Dict[int, TapeNode] = {}
    stack = [loss._node]
    while stack:
        node = stack.pop()
        if node.tape_id in nodes:
            continue
        nodes[node.tape_id] = node
        stack.extend(t._node for t in node.inputs if t._node is not None)

    pending = {loss._node.tape_id: seed}
    for tape_id in sorted(nodes, reverse=True):
        node = nodes[tape_id]
        grad = pending.pop(tape_id, None)
        if grad is None:
            continue
        for source, source_grad in zip(node.inputs, node.backward_fn(grad)):
            if source_grad is None or not source.requires_grad:
                continue
            if source._node is None:
                source_grad = np.asarray(source_grad, dtype=DTYPE).reshape(source.shape)
                source.grad = source_grad.copy() if source.grad is None else source.grad + source_grad
            else:
                key = source._node.tape_id
                pending[key] = pending[key] + source_grad if key in pending else source_grad


def gradient_check(f: Callable[[Tensor], Tensor], x: TensorLike, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    base = np.array(_as_tensor(x).data, dtype=DTYPE)
    point = Tensor(base, requires_grad=True)
    out = f(point)
    if out.data.size != 1:
        raise ContractError(f"gradient_check needs a scalar-valued function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("gradient_check: non-finite function value")
    backward(out)
    analytic = point.grad if point.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    with no_grad():
        for index in range(base.size):
            shifted = base.copy().reshape(-1)
            shifted[index] += h
            upper = f(Tensor._wrap(shifted.reshape(base.shape))).item()
            shifted[index] -= 2 * h
            lower = f(Tensor._wrap(shifted.reshape(base.shape))).item()
            if not (np.isfinite(upper) and np.isfinite(lower)):
                raise NumericError(f"gradient_check: non-finite value at coordinate {index}")
            flat[index] = (upper - lower) / (2 * h)

    if not np.isfinite(analytic).all():
        raise NumericError("gradient_check: non-finite analytic gradient")
    error = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(error.max()) if error.size else 0.0


# Randomness

@dataclass
class RngStream:
    """Counter-based random stream: (seed, stream_id) fixes every draw on every platform."""
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        key = np.random.SeedSequence([int(self.seed) & 0xFFFFFFFFFFFFFFFF,
                                      int(self.stream_id)]).generate_state(2, dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def split(self, stream_id: int) -> 'RngStream':
        """Independent child stream for a trial, layer or worker."""
        return RngStream(seed=self.seed, stream_id=self.stream_id * 1_000_003 + int(stream_id) + 1)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low: int, high: int = None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def random(self, size=None):
        return self.generator.random(size)
