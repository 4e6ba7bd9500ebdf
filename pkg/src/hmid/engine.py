"""Dense tensors with tape-based reverse-mode differentiation.

Every public op accepts either plain ``numpy`` arrays or :class:`Tensor`
objects. With no Tensor among the inputs the op is just the numpy
computation, so the geometry code in :mod:`hmid.lorentz` runs unchanged on
raw arrays. When a Tensor that requires grad is involved and a :class:`Tape`
is active, the op records a closure that maps the output gradient to input
gradients.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum(w * w)
    >>> grads = tape.backward(loss)
"""
from __future__ import annotations

import math
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "TapeError",
    "as_array", "is_tensor", "no_grad_view",
    "matmul", "add", "sub", "mul", "div", "neg", "square", "exp", "log",
    "sqrt", "cosh", "sinh", "acosh", "acosh1p", "asin", "acos", "tanh", "clamp", "where",
    "sum", "mean", "max", "softmax_rows", "log_softmax_rows", "gather_rows",
    "concat", "reshape", "transpose", "layer_norm", "gelu",
    "embedding_lookup", "finite_diff_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (reused, non-scalar loss, foreign loss)."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An ndarray plus a ``requires_grad`` flag.

    ``frozen`` marks parameters the optimizer must never touch.
    """

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    __slots__ = ("data", "requires_grad", "grad", "name", "frozen", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, frozen: bool = False):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self.frozen = frozen
        self._tape: Tape | None = None

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
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
        return float(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{label})"

    # -- operators -----------------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        if exponent == 2:
            return square(self)
        if exponent == 0.5:
            return sqrt(self)
        raise NotImplementedError("only squares and square roots are supported")

    def __getitem__(self, index):
        return _getitem(self, index)

    @property
    def T(self):
        return transpose(self)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def as_array(x) -> np.ndarray:
    """The raw ndarray behind ``x`` (Tensor or array-like)."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _raw(x):
    # python scalars stay python scalars so float32 arrays are not promoted
    if isinstance(x, Tensor):
        return x.data
    return x if isinstance(x, (int, float)) else np.asarray(x)


def no_grad_view(x):
    """A Tensor sharing ``x``'s data with no gradient tracking."""
    return Tensor(as_array(x)) if isinstance(x, Tensor) else x


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; ops evaluated inside are recorded. A tape
    supports exactly one :meth:`backward` call.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple, Callable]] = []
        self._used = False

    def __enter__(self) -> "Tape":
        if self._used:
            raise TapeError("tape already consumed by backward()")
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        out._tape = self
        self._records.append((out, inputs, backward))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate from a scalar ``loss``; returns ``{id(leaf): grad}``.

        Gradients are also accumulated into ``leaf.grad`` for every leaf
        that requires grad.
        """
        if self._used:
            raise TapeError("backward() called twice on the same tape")
        if not isinstance(loss, Tensor) or loss.data.size != 1:
            raise TapeError("loss must be a scalar Tensor")
        if loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, inputs, fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            in_grads = fn(g)
            for inp, gi in zip(inputs, in_grads):
                if gi is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if inp._tape is not self:
                    leaves[key] = inp
        result: dict[int, np.ndarray] = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[key] = g
        self._records.clear()
        return result


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _needs_grad(inputs: Iterable) -> "Tape | None":
    tape = _active_tape()
    if tape is None:
        return None
    for x in inputs:
        if isinstance(x, Tensor) and x.requires_grad:
            return tape
    return None


def _result(data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = _needs_grad(inputs)
    if tape is not None:
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _any_tensor(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def _shape_of(x) -> tuple[int, ...]:
    return np.shape(as_array(x))


# ---------------------------------------------------------------------------
# binary elementwise
# ---------------------------------------------------------------------------

def _check_broadcast(a, b, op: str) -> None:
    try:
        np.broadcast_shapes(_shape_of(a), _shape_of(b))
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {_shape_of(a)} and {_shape_of(b)}") from exc


def add(a, b):
    if not _any_tensor(a, b):
        return np.add(a, b)
    _check_broadcast(a, b, "add")
    ad, bd = _raw(a), _raw(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return _result(ad + bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    if not _any_tensor(a, b):
        return np.subtract(a, b)
    _check_broadcast(a, b, "sub")
    ad, bd = _raw(a), _raw(b)
    sa, sb = np.shape(ad), np.shape(bd)
    return _result(ad - bd, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    if not _any_tensor(a, b):
        return np.multiply(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = _raw(a), _raw(b)

    def backward(g):
        return _unbroadcast(g * bd, np.shape(ad)), _unbroadcast(g * ad, np.shape(bd))

    return _result(ad * bd, (a, b), backward)


def div(a, b):
    if not _any_tensor(a, b):
        return np.divide(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = _raw(a), _raw(b)
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, np.shape(ad)), _unbroadcast(-ga * out, np.shape(bd))

    return _result(out, (a, b), backward)


def neg(a):
    if not _any_tensor(a):
        return np.negative(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product with numpy semantics (leading dims broadcast)."""
    if not _any_tensor(a, b):
        return np.matmul(a, b)
    ad, bd = as_array(a), as_array(b)
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: cannot contract {ad.shape} with {bd.shape}")
    flat = ad.ndim > 2 and bd.ndim == 2
    if flat:
        # [..., n] @ [n, m] as one 2-D GEMM
        a2 = ad.reshape(-1, ad.shape[-1])
        out = (a2 @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
    else:
        out = ad @ bd

    def backward(g):
        ga = gb = None
        if flat:
            g2 = g.reshape(-1, g.shape[-1])
            if isinstance(a, Tensor) and a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if isinstance(b, Tensor) and b.requires_grad:
                gb = a2.T @ g2
            return ga, gb
        if isinstance(a, Tensor) and a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if isinstance(b, Tensor) and b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(out, (a, b), backward)


# ---------------------------------------------------------------------------
# unary elementwise
# ---------------------------------------------------------------------------

def square(a):
    if not _any_tensor(a):
        return np.square(a)
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,))


def exp(a):
    if not _any_tensor(a):
        return np.exp(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    if not _any_tensor(a):
        return np.log(a)
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a):
    if not _any_tensor(a):
        return np.sqrt(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g / (2.0 * out),))


def cosh(a):
    if not _any_tensor(a):
        return np.cosh(a)
    x = a.data
    return _result(np.cosh(x), (a,), lambda g: (g * np.sinh(x),))


def sinh(a):
    if not _any_tensor(a):
        return np.sinh(a)
    x = a.data
    return _result(np.sinh(x), (a,), lambda g: (g * np.cosh(x),))


def tanh(a):
    if not _any_tensor(a):
        return np.tanh(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),))


# Floors keep the inverse-trig derivatives finite at the domain edges; callers
# clamp the arguments themselves before reaching these.
_DERIV_FLOOR = 1e-30


def acosh(a):
    """Inverse cosh; arguments below 1 evaluate as 1."""
    if not _any_tensor(a):
        return np.arccosh(np.maximum(a, 1.0))
    x = a.data
    out = np.arccosh(np.maximum(x, 1.0))

    def backward(g):
        return (g / np.sqrt(np.maximum(x * x - 1.0, _DERIV_FLOOR)),)

    return _result(out, (a,), backward)


def acosh1p(a):
    """``acosh(1 + a)`` for ``a >= 0``, accurate for small ``a``."""
    x = np.maximum(as_array(a), 0.0)
    out = np.log1p(x + np.sqrt(x * (x + 2.0)))
    if not _any_tensor(a):
        return out

    def backward(g):
        return (g / np.sqrt(np.maximum(x * (x + 2.0), _DERIV_FLOOR)),)

    return _result(out, (a,), backward)


def asin(a):
    if not _any_tensor(a):
        return np.arcsin(a)
    x = a.data
    return _result(np.arcsin(x), (a,),
                   lambda g: (g / np.sqrt(np.maximum(1.0 - x * x, _DERIV_FLOOR)),))


def acos(a):
    if not _any_tensor(a):
        return np.arccos(a)
    x = a.data
    return _result(np.arccos(x), (a,),
                   lambda g: (-g / np.sqrt(np.maximum(1.0 - x * x, _DERIV_FLOOR)),))


def clamp(a, lo=None, hi=None):
    """Hard clamp: gradient 1 on ``[lo, hi]`` (inclusive), 0 outside."""
    if not _any_tensor(a):
        return np.clip(a, lo, hi)
    x = a.data
    out = np.clip(x, lo, hi)

    def backward(g):
        inside = np.ones(x.shape, dtype=bool)
        if lo is not None:
            inside &= x >= lo
        if hi is not None:
            inside &= x <= hi
        return (g * inside,)

    return _result(out, (a,), backward)


def where(cond, a, b):
    """Select ``a`` where ``cond`` else ``b``; ``cond`` is never differentiated."""
    cond = np.asarray(as_array(cond), dtype=bool)
    if not _any_tensor(a, b):
        return np.where(cond, a, b)
    ad, bd = _raw(a), _raw(b)

    def backward(g):
        return (None, _unbroadcast(np.where(cond, g, 0), np.shape(ad)),
                _unbroadcast(np.where(cond, 0, g), np.shape(bd)))

    return _result(np.where(cond, ad, bd), (cond, a, b), backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """GELU, tanh approximation."""
    x = as_array(a)
    t = np.tanh(x * (_GELU_C + (_GELU_C * 0.044715) * (x * x)))
    out = (0.5 * x) * (1.0 + t)
    if not _any_tensor(a):
        return out

    def backward(g):
        x2 = x * x
        half_x_sech2 = (0.5 * x) * (1.0 - t * t)
        return (g * (0.5 * (1.0 + t) + half_x_sech2 * (_GELU_C + (3 * 0.044715 * _GELU_C) * x2)),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def _expand_grad(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims: bool = False):
    if not _any_tensor(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (a,), lambda g: (_expand_grad(g, shape, axis, keepdims).copy(),))


def mean(a, axis=None, keepdims: bool = False):
    if not _any_tensor(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    shape = a.shape
    n = a.data.size if axis is None else np.prod([shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    return _result(np.asarray(out), (a,),
                   lambda g: (_expand_grad(g / n, shape, axis, keepdims).copy(),))


def max(a, axis=None, keepdims: bool = False):
    """Maximum; ties split the gradient evenly."""
    if not _any_tensor(a):
        return np.max(a, axis=axis, keepdims=keepdims)
    x = a.data
    out = np.max(x, axis=axis, keepdims=True)

    def backward(g):
        mask = (x == out).astype(x.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)
        return (mask * _expand_grad(g, x.shape, axis, keepdims),)

    value = out if keepdims else np.squeeze(out, axis=axis)
    return _result(np.asarray(value), (a,), backward)


def softmax_rows(a):
    """Softmax over the last axis."""
    x = as_array(a)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)
    if not _any_tensor(a):
        return out

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax_rows(a):
    """Log-softmax over the last axis."""
    x = as_array(a)
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    if not _any_tensor(a):
        return out

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result(out, (a,), backward)


# ---------------------------------------------------------------------------
# indexing and layout
# ---------------------------------------------------------------------------

def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def _getitem(a: Tensor, index):
    x = a.data
    out = x[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, copy=True), (a,), backward)


def gather_rows(a, idx):
    """``a[i, idx[i]]`` for each leading row ``i``."""
    idx = np.asarray(idx, dtype=np.intp)
    x = as_array(a)
    if idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: index shape {idx.shape} vs rows {x.shape[0]}")
    rows = np.arange(x.shape[0])
    out = x[rows, idx]
    if not _any_tensor(a):
        return out

    def backward(g):
        full = np.zeros_like(x)
        full[rows, idx] = g
        return (full,)

    return _result(out, (a,), backward)


def embedding_lookup(table, ids):
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.intp)
    t = as_array(table)
    if ids.size and (ids.min() < 0 or ids.max() >= t.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range [0, {t.shape[0]})")
    out = t[ids]
    if not _any_tensor(table):
        return out

    def backward(g):
        full = np.zeros_like(t)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, t.shape[-1]))
        return (full,)

    return _result(out, (table,), backward)


def concat(xs: Sequence, axis: int = 0):
    arrays = [as_array(x) for x in xs]
    try:
        out = np.concatenate(arrays, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    if not _any_tensor(*xs):
        return out
    sizes = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, tuple(xs), backward)


def reshape(a, shape):
    if not _any_tensor(a):
        return np.reshape(a, shape)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if not _any_tensor(a):
        return np.transpose(a, axes)
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _result(out, (a,), lambda g: (np.transpose(g, inverse),))


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------

def layer_norm(a, gamma, beta, eps: float = 1e-5):
    """Normalize over the last axis, then scale and shift."""
    x = as_array(a)
    gd, bd = as_array(gamma), as_array(beta)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gd + bd
    if not _any_tensor(a, gamma, beta):
        return out
    n = x.shape[-1]

    def backward(g):
        gx = None
        if isinstance(a, Tensor) and a.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (a, gamma, beta), backward)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
                      atol: float = 1e-8) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    ``f`` maps a Tensor to a scalar Tensor. The error is measured on the whole
    gradient: ``max|a - n| / max(max|a|, max|n|, atol)``, so a constant ``f``
    (both gradients zero) reports 0.
    """
    base = np.array(as_array(x), dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if not isinstance(out, Tensor) or not out.requires_grad:
        analytic = np.zeros_like(base)
    else:
        analytic = tape.backward(out).get(id(leaf), np.zeros_like(base))
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(as_array(f(Tensor(base.copy()))))
        flat[i] = orig - h
        down = float(as_array(f(Tensor(base.copy()))))
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * h)
    if not base.size:
        return 0.0
    scale = np.max(np.maximum(np.abs(analytic), np.abs(numeric)))
    return float(np.max(np.abs(analytic - numeric)) / np.maximum(scale, atol))
