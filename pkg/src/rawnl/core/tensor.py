"""Dense float tensors and a tape for reverse-mode differentiation.

Operations record themselves on the active :class:`Tape` whenever at least one
input requires a gradient. Without an active tape, ops run in inference mode
and record nothing.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

_FLOAT_TYPES = (np.float32, np.float64)

_local = threading.local()


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


class _Record:
    __slots__ = ("inputs", "output", "backward", "name")

    def __init__(self, inputs, output, backward, name):
        self.inputs = inputs
        self.output = output
        self.backward = backward
        self.name = name


class Tape:
    """Ordered log of differentiable ops, replayed backward by :meth:`backward`.

    Use as a context manager. A tape belongs to the thread that created it.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._thread = threading.get_ident()

    def __enter__(self) -> "Tape":
        self._check_thread()
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def _check_thread(self) -> None:
        if threading.get_ident() != self._thread:
            raise RuntimeError("a Tape must be recorded and replayed on the thread that created it")

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable, name: str = "") -> None:
        self.records.append(_Record(tuple(inputs), output, backward, name))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires grad."""
        self._check_thread()
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.output) for r in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            if g.shape != rec.output.shape:
                raise ShapeError(f"{rec.name}: upstream grad {g.shape} != output {rec.output.shape}")
            in_grads = rec.backward(g)
            for inp, gi in zip(rec.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, t in leaves.items():
            g = grads[key].astype(t.dtype, copy=False)
            if t.grad is None:
                t.grad = g.copy()
            else:
                t.grad += g
        if id(loss) in grads and loss.requires_grad and id(loss) not in produced:
            loss.grad = grads[id(loss)]


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def make_output(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    """Wrap an op result, recording it on the active tape if any input needs a gradient."""
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward, name)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_output(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return make_output(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return make_output(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return make_output(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),), "scale")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    # right-hand derivative at 0
    pos = x.data >= 0
    s = x.dtype.type(slope)
    out = np.where(pos, x.data, x.data * s)
    return make_output(out, (x,), lambda g: (np.where(pos, g, g * s),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    pos = x.data >= 0
    out = np.where(pos, x.data, 0).astype(x.dtype)
    return make_output(out, (x,), lambda g: (np.where(pos, g, 0).astype(g.dtype),), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    # keep the result strictly inside (0, 1) after rounding
    one = x.dtype.type(1)
    out = np.clip(out, np.nextafter(0, one), np.nextafter(one, 0)).astype(x.dtype, copy=False)
    return make_output(out, (x,), lambda g: (g * out * (1 - out),), "sigmoid")


def tanh_scaled(x: Tensor, r: float) -> Tensor:
    """``r * tanh(x)``; the result lies strictly inside (-r, r) for finite x."""
    t = np.tanh(x.data)
    rr = x.dtype.type(r)
    # tanh rounds to +-1 in float32 once saturated
    lim = np.nextafter(rr, x.dtype.type(0))
    out = np.clip(rr * t, -lim, lim)
    return make_output(out, (x,), lambda g: (g * rr * (1 - t * t),), "tanh_scaled")


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = (xd * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(g.dtype, copy=False),)

    return make_output(out, (x,), backward, "gelu")


# --- reductions and layout --------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    out = np.array([x.data.sum()], dtype=x.dtype)
    return make_output(out, (x,), lambda g: (np.full(x.shape, g[0], dtype=x.dtype),), "sum")


def mean_abs_diff(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of |pred - target| over all elements; subgradient sign(0) = 0."""
    _same_shape(pred, target, "mean_abs_diff")
    diff = pred.data - target.data
    n = diff.size
    out = np.array([np.abs(diff).mean(dtype=np.float64)], dtype=pred.dtype)

    def backward(g):
        s = np.sign(diff) * (g[0] / n)
        return s.astype(pred.dtype), (-s).astype(target.dtype)

    return make_output(out, (pred, target), backward, "mean_abs_diff")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_output(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_output(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_output(out, tuple(tensors), backward, "concat")
