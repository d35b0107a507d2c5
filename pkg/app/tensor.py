# app/tensor.py
"""
Dense tensors and reverse-mode differentiation.

- `Tensor` wraps a read-only numpy buffer in the active precision.
- Every operation is a registered `DifferentiableOp` (forward + vjp).
- A `Tape` records the ops applied to watched tensors and pulls cotangents back
  through them with `Tape.gradient`.

Shape mixing is strict: operands must match exactly, except that a 0-d tensor may
pair with any tensor. Row broadcasts go through the explicit `add_bias` op.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from app import config
from app.errors import ShapeError, UsageError

DTYPES: Dict[str, type] = {"float32": np.float32, "float64": np.float64}

_default_mode = config.PRECISION
_mode_override: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar(
    "vlm_precision", default=None
)


def _check_mode(mode: str) -> str:
    if mode not in DTYPES:
        raise UsageError(f"unknown precision mode {mode!r}; expected one of {sorted(DTYPES)}")
    return mode


def set_default_precision(mode: str) -> None:
    """Process-wide default (worker threads included)."""
    global _default_mode
    _default_mode = _check_mode(mode)


def current_precision() -> str:
    return _mode_override.get() or _default_mode


def get_dtype() -> type:
    return DTYPES[current_precision()]


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    token = _mode_override.set(_check_mode(mode))
    try:
        yield
    finally:
        _mode_override.reset(token)


# ------------------------- Tensor -------------------------------

Operand = Union["Tensor", float, int, np.ndarray]


class Tensor:
    __slots__ = ("_data",)

    def __init__(self, data: Any, dtype: Optional[type] = None):
        if isinstance(data, Tensor):
            data = data._data
        arr = np.array(data, dtype=dtype or get_dtype(), copy=True)
        arr.setflags(write=False)
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        obj = object.__new__(cls)
        arr = np.asarray(arr)
        arr.setflags(write=False)
        obj._data = arr
        return obj

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self._data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self._data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"

    # arithmetic sugar; all of it goes through registered ops
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Union[float, int]) -> "Tensor":
        if not isinstance(other, (int, float)):
            raise ShapeError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self) -> "Tensor":
        return neg(self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: Any) -> "Tensor":
        return getitem(self, index)


def as_tensor(x: Operand) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(tuple(shape), dtype=get_dtype()))


# ------------------------- Ops -------------------------------

@dataclass(frozen=True)
class DifferentiableOp:
    """forward(*arrays, **attrs) -> array; vjp(arrays, out, g, **attrs) -> one cotangent per input."""

    name: str
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., Tuple[Optional[np.ndarray], ...]]


OPS: Dict[str, DifferentiableOp] = {}


def register(name: str, forward: Callable[..., np.ndarray], vjp: Callable[..., tuple]) -> DifferentiableOp:
    op = DifferentiableOp(name=name, forward=forward, vjp=vjp)
    OPS[name] = op
    return op


def apply(op: DifferentiableOp, *inputs: Tensor, **attrs: Any) -> Tensor:
    out = Tensor._wrap(op.forward(*(t._data for t in inputs), **attrs))
    for tape in _TAPES.get():
        tape._record(op, inputs, out, attrs)
    return out


def _pair_shapes(name: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    return np.asarray(g.sum()).reshape(()) if shape == () and g.shape != () else g


def _add_fwd(a, b):
    _pair_shapes("add", a, b)
    return a + b


def _sub_fwd(a, b):
    _pair_shapes("sub", a, b)
    return a - b


def _mul_fwd(a, b):
    _pair_shapes("mul", a, b)
    return a * b


_ADD = register("add", _add_fwd, lambda xs, out, g: (_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)))
_SUB = register("sub", _sub_fwd, lambda xs, out, g: (_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)))
_MUL = register(
    "mul",
    _mul_fwd,
    lambda xs, out, g: (_unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)),
)
_NEG = register("neg", lambda a: -a, lambda xs, out, g: (-g,))


def _matmul_fwd(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return a @ b


_MATMUL = register("matmul", _matmul_fwd, lambda xs, out, g: (g @ xs[1].T, xs[0].T @ g))
_TANH = register("tanh", np.tanh, lambda xs, out, g: (g * (1.0 - out * out),))
_SIGMOID = register("sigmoid", expit, lambda xs, out, g: (g * out * (1.0 - out),))
_RELU = register("relu", lambda a: np.maximum(a, 0), lambda xs, out, g: (g * (xs[0] > 0),))


def _sum_fwd(a, axis=None):
    return np.asarray(np.sum(a, axis=axis))


def _sum_vjp(xs, out, g, axis=None):
    a = xs[0]
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)


_SUM = register("sum", _sum_fwd, _sum_vjp)


def _add_bias_fwd(x, b):
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")
    return x + b


_ADD_BIAS = register(
    "add_bias",
    _add_bias_fwd,
    lambda xs, out, g: (g, g.reshape(-1, xs[1].shape[0]).sum(axis=0)),
)


def _reshape_fwd(a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    return a.reshape(shape)


_RESHAPE = register("reshape", _reshape_fwd, lambda xs, out, g, shape: (g.reshape(xs[0].shape),))
_TRANSPOSE = register(
    "transpose",
    lambda a, axes: np.transpose(a, axes),
    lambda xs, out, g, axes: (np.transpose(g, np.argsort(axes)),),
)
_FLIP = register("flip", lambda a, axis: np.flip(a, axis), lambda xs, out, g, axis: (np.flip(g, axis),))


def _getitem_vjp(xs, out, g, index):
    z = np.zeros_like(xs[0])
    z[index] = g
    return (z,)


_GETITEM = register("getitem", lambda a, index: a[index], _getitem_vjp)


def _stack_fwd(*arrays, axis=0):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"stack: operands differ in shape {sorted(shapes)}")
    return np.stack(arrays, axis=axis)


_STACK = register(
    "stack",
    _stack_fwd,
    lambda xs, out, g, axis=0: tuple(np.take(g, i, axis=axis) for i in range(len(xs))),
)


# ---- convolution (im2col) and pooling, single image in C x H x W ----

def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = x.shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    img = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    col = np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for xx in range(kw):
            x_max = xx + stride * ow
            col[:, y, xx] = img[:, y:y_max:stride, xx:x_max:stride]
    return col.reshape(c * kh * kw, oh * ow)


def col2im(col: np.ndarray, shape: Tuple[int, int, int], kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    c, h, w = shape
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    col = col.reshape(c, kh, kw, oh, ow)
    img = np.zeros((c, h + 2 * pad + stride - 1, w + 2 * pad + stride - 1), dtype=col.dtype)
    for y in range(kh):
        y_max = y + stride * oh
        for xx in range(kw):
            x_max = xx + stride * ow
            img[:, y:y_max:stride, xx:x_max:stride] += col[:, y, xx]
    return img[:, pad:pad + h, pad:pad + w]


def _conv_fwd(x, w, b, stride, pad):
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0] or b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape} disagree")
    o, _, kh, kw = w.shape
    oh = conv_output_size(x.shape[1], kh, stride, pad)
    ow = conv_output_size(x.shape[2], kw, stride, pad)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and kernel {w.shape}")
    col = im2col(x, kh, kw, stride, pad)
    out = w.reshape(o, -1) @ col + b[:, None]
    return out.reshape(o, oh, ow)


def _conv_vjp(xs, out, g, stride, pad):
    x, w, _ = xs
    o, _, kh, kw = w.shape
    g2 = g.reshape(o, -1)
    col = im2col(x, kh, kw, stride, pad)
    dw = (g2 @ col.T).reshape(w.shape)
    db = g2.sum(axis=1)
    dx = col2im(w.reshape(o, -1).T @ g2, x.shape, kh, kw, stride, pad)
    return dx, dw, db


_CONV2D = register("conv2d", _conv_fwd, _conv_vjp)


def _pool_windows(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(x, (kernel, kernel), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _maxpool_fwd(x, kernel, stride):
    if x.ndim != 3 or x.shape[1] < kernel or x.shape[2] < kernel:
        raise ShapeError(f"maxpool2d: input {x.shape} smaller than window {kernel}")
    return _pool_windows(x, kernel, stride).max(axis=(3, 4))


def _maxpool_vjp(xs, out, g, kernel, stride):
    x = xs[0]
    win = _pool_windows(x, kernel, stride)
    c, oh, ow = out.shape
    arg = win.reshape(c, oh, ow, kernel * kernel).argmax(axis=3)
    dy, dx = np.divmod(arg, kernel)
    cc, yy, xx = np.indices((c, oh, ow))
    dxs = np.zeros_like(x)
    np.add.at(dxs, (cc, yy * stride + dy, xx * stride + dx), g)
    return (dxs,)


_MAXPOOL2D = register("maxpool2d", _maxpool_fwd, _maxpool_vjp)


# ---- public op functions ----

def add(a: Operand, b: Operand) -> Tensor:
    return apply(_ADD, as_tensor(a), as_tensor(b))


def sub(a: Operand, b: Operand) -> Tensor:
    return apply(_SUB, as_tensor(a), as_tensor(b))


def mul(a: Operand, b: Operand) -> Tensor:
    return apply(_MUL, as_tensor(a), as_tensor(b))


def neg(a: Tensor) -> Tensor:
    return apply(_NEG, a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply(_MATMUL, as_tensor(a), as_tensor(b))


def tanh(a: Tensor) -> Tensor:
    return apply(_TANH, as_tensor(a))


def sigmoid(a: Tensor) -> Tensor:
    return apply(_SIGMOID, as_tensor(a))


def relu(a: Tensor) -> Tensor:
    return apply(_RELU, as_tensor(a))


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    return apply(_SUM, a, axis=axis)


def mean(a: Tensor) -> Tensor:
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    return mul(sum(a), 1.0 / a.size)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return apply(_ADD_BIAS, x, as_tensor(b))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return apply(_RESHAPE, a, shape=tuple(int(s) for s in shape))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    return apply(_TRANSPOSE, a, axes=tuple(axes))


def flip(a: Tensor, axis: int) -> Tensor:
    return apply(_FLIP, a, axis=axis)


def getitem(a: Tensor, index: Any) -> Tensor:
    return apply(_GETITEM, a, index=index)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return apply(_STACK, *tensors, axis=axis)


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    return apply(_CONV2D, x, as_tensor(w), as_tensor(b), stride=stride, pad=pad)


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    return apply(_MAXPOOL2D, x, kernel=kernel, stride=stride)


# ------------------------- Tape -------------------------------

@dataclass
class _Record:
    op: DifferentiableOp
    inputs: Tuple[Tensor, ...]
    output: Tensor
    attrs: Dict[str, Any]


_TAPES: contextvars.ContextVar[Tuple["Tape", ...]] = contextvars.ContextVar("vlm_tapes", default=())


@dataclass
class Tape:
    """Records ops downstream of watched tensors. One tape per evaluation."""

    _records: List[_Record] = field(default_factory=list)
    _live: set = field(default_factory=set)
    _keep: List[Tensor] = field(default_factory=list)
    _tokens: List[contextvars.Token] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._tokens.append(_TAPES.set(_TAPES.get() + (self,)))
        return self

    def __exit__(self, *exc: Any) -> None:
        _TAPES.reset(self._tokens.pop())

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._live.add(id(t))
            self._keep.append(t)

    def _record(self, op: DifferentiableOp, inputs: Tuple[Tensor, ...], out: Tensor, attrs: Dict[str, Any]) -> None:
        if any(id(t) in self._live for t in inputs):
            self._records.append(_Record(op, inputs, out, attrs))
            self._live.add(id(out))

    def gradient(
        self,
        target: Tensor,
        sources: Sequence[Tensor],
        upstream: Optional[np.ndarray] = None,
    ) -> List[np.ndarray]:
        """Cotangents of `target` w.r.t. `sources`, seeded with `upstream` (ones by default)."""
        seed = np.ones_like(target.data) if upstream is None else np.asarray(upstream, dtype=target.dtype)
        if seed.shape != target.shape:
            raise ShapeError(f"upstream cotangent {seed.shape} does not match target {target.shape}")
        cot: Dict[int, np.ndarray] = {id(target): seed}
        for rec in reversed(self._records):
            g = cot.get(id(rec.output))
            if g is None:
                continue
            grads = rec.op.vjp(tuple(t._data for t in rec.inputs), rec.output._data, g, **rec.attrs)
            for t, gi in zip(rec.inputs, grads):
                if gi is None or id(t) not in self._live:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{rec.op.name}: vjp shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                cot[key] = cot[key] + gi if key in cot else gi
        return [np.array(cot.get(id(s), np.zeros(s.shape, dtype=s.dtype))) for s in sources]
