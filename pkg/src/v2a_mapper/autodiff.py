"""Tape-based reverse-mode differentiation over dense numpy arrays.

Operations run inside a ``Tape`` context are appended to the tape in call
order; ``backward`` replays that record in reverse.  Outside a tape, the same
operations compute plain forward values and record nothing.

Only the operations the mapper networks need are provided.  Broadcasting is
limited to adding a trailing-shape bias (e.g. a ``(d,)`` vector over the rows
of a ``(..., d)`` array).
"""

from __future__ import annotations

import contextvars
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, ShapeError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "v2a_active_tape", default=None
)


class Tensor:
    """An n-d array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.array(data, dtype=dtype, copy=None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.name = name
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a python scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tape:
    """Ordered record of the operations of one forward pass.

    A tape is owned by a single forward/backward pass; independent passes
    (e.g. on different threads) must use separate tapes.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._outputs: set[int] = set()
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Backward) -> None:
        self.records.append((out, inputs, backward))
        self._outputs.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Backward) -> Tensor:
    """Wrap a forward result and register ``backward`` on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data)
    out.is_leaf = False
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, tuple(inputs), backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every grad-requiring leaf.

    Gradients add onto whatever is already stored; call ``zero_grad`` between
    optimisation steps.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.is_leaf:
        if loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.data)
        return
    if not tape.produced(loss):
        raise ContractError("loss was not recorded on this tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, inputs, fn in reversed(tape.records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                inp.grad += gi
            else:
                key = id(inp)
                pending[key] = pending[key] + gi if key in pending else gi


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def _bias_axes(big: tuple[int, ...], small: tuple[int, ...]) -> tuple[int, ...] | None:
    """Leading axes to reduce when ``small`` is a trailing-shape bias of ``big``."""
    if big == small:
        return ()
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return tuple(range(len(big) - len(small)))
    return None


def _check_bias(a: Tensor, b: Tensor, opname: str):
    ra = _bias_axes(a.shape, b.shape)
    if ra is not None:
        return (), ra
    rb = _bias_axes(b.shape, a.shape)
    if rb is not None:
        return rb, ()
    raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    red_a, red_b = _check_bias(a, b, "add")

    def bwd(g):
        return (g.sum(axis=red_a) if red_a else g, g.sum(axis=red_b) if red_b else g)

    return make_op(a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    red_a, red_b = _check_bias(a, b, "sub")

    def bwd(g):
        return (g.sum(axis=red_a) if red_a else g, -(g.sum(axis=red_b) if red_b else g))

    return make_op(a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    """Elementwise product of equal shapes, or tensor times python scalar."""
    if np.isscalar(a):
        return scale(b, a)
    if np.isscalar(b):
        return scale(a, b)
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    return make_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` is either a single 2-d matrix shared by every leading index of ``a``,
    or has exactly ``a``'s leading (batch) shape.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim == 2:
        def bwd(g):
            ga = g @ b.data.T
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
    elif a.shape[:-2] == b.shape[:-2]:
        def bwd(g):
            return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g
    else:
        raise ShapeError(f"matmul: batch shapes of {a.shape} and {b.shape} differ")
    return make_op(a.data @ b.data, (a, b), bwd)


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = expit(x.data)
    return make_op(x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gamma.shape} / bias {beta.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        dxhat = g * gamma.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_op(xhat * gamma.data + beta.data, (x, gamma, beta), bwd)


def softmax(x) -> Tensor:
    """Softmax over the last axis (each row sums to one)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_op(y, (x,), bwd)


softmax_rows = softmax


# ---------------------------------------------------------------------------
# reductions and shape manipulation

def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bwd(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(out, (x,), bwd)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis), 1.0 / float(n))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    return make_op(
        np.concatenate([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    n = len(ts)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return make_op(np.stack([t.data for t in ts], axis=axis), ts, bwd)


def take(x, index: int, axis: int) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    x = as_tensor(x)

    def bwd(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return make_op(np.take(x.data, index, axis=axis), (x,), bwd)


def gather_rows(table, idx) -> Tensor:
    """Row lookup ``table[idx]`` for an integer index array."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.intp)

    def bwd(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_op(table.data[idx], (table,), bwd)


def repeat_rows(v, n: int) -> Tensor:
    """Stack ``n`` copies of vector ``v`` into an ``(n, d)`` matrix."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"repeat_rows expects a vector, got {v.shape}")
    return make_op(np.broadcast_to(v.data, (n,) + v.shape).copy(), (v,), lambda g: (g.sum(axis=0),))


def where_rows(keep, x, fallback) -> Tensor:
    """Row ``i`` of ``x`` where ``keep[i]`` is true, otherwise the vector ``fallback``."""
    x, fallback = as_tensor(x), as_tensor(fallback)
    keep = np.asarray(keep, dtype=bool)
    if x.ndim != 2 or fallback.shape != x.shape[1:] or keep.shape != x.shape[:1]:
        raise ShapeError(f"where_rows: rows {x.shape}, fallback {fallback.shape}, mask {keep.shape}")
    mask = keep[:, None]

    def bwd(g):
        return np.where(mask, g, 0.0), np.where(mask, 0.0, g).sum(axis=0)

    return make_op(np.where(mask, x.data, fallback.data), (x, fallback), bwd)


# ---------------------------------------------------------------------------
# verification

def grad_check(
    f: Callable,
    point,
    eps: float = 1e-5,
    floor: float = 1e-4,
) -> float:
    """Worst relative error between taped and central-difference gradients.

    ``point`` is an array or a mapping of name -> array; ``f`` receives Tensors
    in the same structure and returns a scalar Tensor.  Each coordinate uses a
    step of ``eps * max(1, |x|)``.  The relative error divides by
    ``max(|numeric|, floor)`` so vanishing gradients are compared absolutely.
    """
    is_map = isinstance(point, Mapping)
    base = {k: np.array(v, dtype=np.float64) for k, v in (point.items() if is_map else [("x", point)])}

    def call(arrays, requires_grad=False):
        ts = {k: Tensor(a, requires_grad=requires_grad) for k, a in arrays.items()}
        return ts, f(ts if is_map else ts["x"])

    with Tape() as tape:
        leaves, out = call(base, requires_grad=True)
    backward(out, tape)

    worst = 0.0
    for key, arr in base.items():
        analytic = leaves[key].grad
        for idx in np.ndindex(arr.shape):
            h = eps * max(1.0, abs(arr[idx]))
            probe = dict(base)
            shifted = arr.copy()
            shifted[idx] = arr[idx] + h
            probe[key] = shifted
            f_plus = float(call(probe)[1].data)
            shifted = arr.copy()
            shifted[idx] = arr[idx] - h
            probe[key] = shifted
            f_minus = float(call(probe)[1].data)
            numeric = (f_plus - f_minus) / (2.0 * h)
            err = abs(analytic[idx] - numeric) / max(abs(numeric), floor)
            worst = max(worst, err)
    return worst
