"""Tape-based reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active are recorded in
execution order together with a closure mapping the output gradient to
the gradients of the inputs. Outside a tape, the same functions only
compute values, which keeps evaluation and sampling cheap.

Example::

    w = Var(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.sum(w * w)
    tape.backward(loss)
    w.grad  # -> array([2., 2., 2.])
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPES = {32: np.float32, 64: np.float64}
_default_dtype = np.float32
_tape_stack: list[Tape | None] = []


def set_precision(bits: int) -> None:
    """Set the float width (32 or 64) used for newly created arrays."""
    global _default_dtype
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _default_dtype = _DTYPES[bits]


def get_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(bits: int):
    prev = _default_dtype
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_default_dtype"] = prev


class Var:
    """A value on (or off) the tape, with an accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "tape_id", "name")
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        if isinstance(value, Var):
            value = value.value
        arr = np.asarray(value)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_default_dtype)
        self.value = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, idx):
        return index(self, idx)


class Tape:
    """Ordered record of executed operations.

    Each node is ``(out, parents, backward_fn)``. Recording order is a valid
    topological order, so the backward pass is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[tuple[Var, tuple[Var, ...], Callable]] = []

    def __enter__(self) -> Tape:
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Var, parents: tuple[Var, ...], backward_fn: Callable) -> None:
        out.tape_id = len(self.nodes)
        out.requires_grad = True
        self.nodes.append((out, parents, backward_fn))

    def backward(self, root: Var) -> None:
        if root.size != 1:
            raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
        leaves: dict[int, Var] = {}
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if p.tape_id is None or p.tape_id >= len(self.nodes) or self.nodes[p.tape_id][0] is not p:
                    leaves[key] = p
        for key, p in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            if p.grad is None or p.grad.shape != p.shape:
                p.grad = g.astype(p.dtype, copy=True)
            else:
                p.grad = p.grad + g


@contextlib.contextmanager
def no_grad():
    """Suspend recording for the enclosed block."""
    _tape_stack.append(None)
    try:
        yield
    finally:
        _tape_stack.pop()


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    arr = np.asarray(x)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(_default_dtype)
    return Var(arr)


def _pair(a, b) -> tuple[Var, Var]:
    # constants adopt the dtype of the Var operand so float32 graphs stay float32
    if isinstance(a, Var) and not isinstance(b, Var):
        return a, Var(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Var) and not isinstance(a, Var):
        return Var(np.asarray(a, dtype=b.dtype)), b
    return as_var(a), as_var(b)


def _out(value: np.ndarray, parents: tuple[Var, ...], backward_fn: Callable) -> Var:
    out = Var(value)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name: str, a: Var, b: Var) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}") from None


# --- elementwise ---------------------------------------------------------

def add(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _out(a.value + b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _out(a.value - b.value, (a, b),
                lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _out(a.value * b.value, (a, b),
                lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Var:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    y = a.value / b.value
    return _out(y, (a, b),
                lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * y / b.value, b.shape)))


def neg(a) -> Var:
    a = as_var(a)
    return _out(-a.value, (a,), lambda g: (-g,))


def square(a) -> Var:
    a = as_var(a)
    return _out(a.value * a.value, (a,), lambda g: (2.0 * g * a.value,))


def exp(a) -> Var:
    a = as_var(a)
    y = np.exp(a.value)
    return _out(y, (a,), lambda g: (g * y,))


def log(a) -> Var:
    a = as_var(a)
    if np.any(a.value <= 0):
        raise ValueError("log: non-positive input")
    return _out(np.log(a.value), (a,), lambda g: (g / a.value,))


def tanh(a) -> Var:
    a = as_var(a)
    y = np.tanh(a.value)
    return _out(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Var:
    a = as_var(a)
    mask = a.value > 0
    return _out(np.where(mask, a.value, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def clamp(a, lo: float, hi: float) -> Var:
    """Clip to ``[lo, hi]``; the gradient is zero where clipping is active."""
    a = as_var(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return _out(np.clip(a.value, lo, hi), (a,), lambda g: (g * mask,))


# --- reductions and shape ops -------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    y = np.sum(a.value, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _out(np.asarray(y), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape: Sequence[int]) -> Var:
    a = as_var(a)
    try:
        y = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _out(y, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int]) -> Var:
    a = as_var(a)
    inv = np.argsort(axes)
    return _out(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Var:
    a = as_var(a)

    def backward(g):
        full = np.zeros_like(a.value)
        np.add.at(full, idx, g)
        return (full,)

    return _out(np.asarray(a.value[idx]), (a,), backward)


def split(a, at: int, axis: int = 1) -> tuple[Var, Var]:
    """Split along ``axis`` into ``[:at]`` and ``[at:]``."""
    a = as_var(a)
    n = a.shape[axis]
    if not 0 < at < n:
        raise ValueError(f"split: index {at} out of range for axis of size {n} in shape {a.shape}")
    lo, hi = np.split(a.value, [at], axis=axis)

    def pad(g, first):
        parts = [g, np.zeros_like(hi)] if first else [np.zeros_like(lo), g]
        return (np.concatenate(parts, axis=axis),)

    return (_out(lo, (a,), lambda g: pad(g, True)),
            _out(hi, (a,), lambda g: pad(g, False)))


def concat(parts: Sequence, axis: int = 1) -> Var:
    parts = [as_var(p) for p in parts]
    try:
        y = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError:
        shapes = " vs ".join(str(p.shape) for p in parts)
        raise ValueError(f"concat: shape mismatch {shapes}") from None
    cuts = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _out(y, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)))


# --- linear algebra -------------------------------------------------------

def matmul(a, b) -> Var:
    a, b = _pair(a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _out(a.value @ b.value, (a, b),
                lambda g: (g @ b.value.T, a.value.T @ g))


def _windows(x: np.ndarray, k: int) -> np.ndarray:
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    n, c, h, w = x.shape
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # n, c, h, w, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)


def conv2d(x, w) -> Var:
    """Stride-1, same-padded 2-D cross-correlation.

    ``x`` is (N, C, H, W), ``w`` is (O, C, k, k) with odd ``k``.
    """
    x, w = as_var(x), as_var(w)
    if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: shape mismatch {x.shape} vs {w.shape}")
    o, c, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {w.shape}")
    n, _, h, wd = x.shape
    cols = _windows(x.value, k)
    wmat = w.value.reshape(o, c * k * k)
    y = (cols @ wmat.T).reshape(n, h, wd, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * h * wd, o)
        dw = (g2.T @ cols).reshape(w.shape)
        dcols = (g2 @ wmat).reshape(n, h, wd, c, k, k)
        p = k // 2
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + wd], dw

    return _out(np.ascontiguousarray(y), (x, w), backward)


# --- gradient oracle ----------------------------------------------------

def finite_diff_check(fn: Callable[[], Var], params: Iterable[Var], step: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar loss from the current parameter values
    and be deterministic across calls.
    """
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise ValueError("finite_diff_check requires 64-bit parameters")
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        root = fn()
    tape.backward(root)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ad in zip(params, analytic):
        flat = p.value.reshape(-1)
        adf = ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().value)
            flat[i] = orig - step
            fm = float(fn().value)
            flat[i] = orig
            fd = (fp - fm) / (2 * step)
            err = abs(adf[i] - fd) / max(abs(adf[i]), abs(fd), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
