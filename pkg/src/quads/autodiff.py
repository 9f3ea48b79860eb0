"""Dense numpy tensors with tape-based reverse-mode differentiation.

Operations record onto the active :class:`Tape` (entered as a context
manager) whenever one of their inputs requires a gradient. Outside a tape,
the same functions run as plain numpy forward passes, which is what
inference and evaluation use.

    >>> x = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = sum_(mul(x, x))
    >>> tape.backward(y)
    >>> x.grad
    array([2., 4.])
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "primitive_forward",
    "finite_diff_check",
    "matmul",
    "add",
    "mul",
    "mul_scalar",
    "conv1d",
    "gelu",
    "relu",
    "softmax",
    "log_softmax",
    "log",
    "abs_",
    "sum_",
    "mean",
    "mean_pool_time",
    "gather_rows",
]

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "quads_active_tape", default=None
)

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """An n-dimensional float array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __sub__(self, other):
        return add(self, mul_scalar(_coerce(other, self), -1.0))

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, other)
        return mul(self, _coerce(other, self))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self))


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


@dataclass
class TapeEntry:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications, replayed in reverse by :meth:`backward`.

    A tape is single-threaded. Each worker that needs gradients owns its own.
    """

    def __init__(self):
        self.entries: list[TapeEntry] = []
        self.consumed = False
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "Tape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def reset(self) -> None:
        for e in self.entries:
            e.output._tape = None
        self.entries.clear()
        self.consumed = False

    def record(self, op, out, inputs, backward_fn) -> None:
        out.requires_grad = True
        out._tape = self
        self.entries.append(TapeEntry(op, out, tuple(inputs), backward_fn))

    def backward(self, root: Tensor) -> None:
        if root.data.size != 1:
            raise ShapeError(f"backward: root must be a scalar, got shape {root.shape}")
        if root._tape is not self:
            raise ValueError("backward: root was not produced on this tape")
        if self.consumed:
            raise RuntimeError("backward: tape already consumed; call reset() first")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.output), None)
            if g is None:
                continue
            for inp, gi in zip(entry.inputs, entry.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._tape is None:
                    gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi


def backward(root: Tensor) -> None:
    """Populate ``.grad`` on every leaf that ``root`` depends on."""
    if root._tape is None:
        raise ValueError("backward: root was not produced through taped primitives")
    root._tape.backward(root)


def _finish(op, out_arr, inputs, backward_fn) -> Tensor:
    out = Tensor._wrap(out_arr)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def _shape_error(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# primitives ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where ``b`` is a 2-D matrix and ``a`` has any leading batch axes."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    av, bv = a.data, b.data
    out = av @ bv

    def back(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, bv.shape[1])
        return ga, gb

    return _finish("matmul", out, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias vector over the last axis of ``a``."""
    if a.shape == b.shape:
        bias = False
    elif b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        bias = True
    else:
        raise _shape_error("add", a.shape, b.shape)
    out = a.data + b.data

    def back(g):
        if bias:
            return g, g.reshape(-1, g.shape[-1]).sum(axis=0)
        return g, g

    return _finish("add", out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    av, bv = a.data, b.data

    def back(g):
        return g * bv, g * av

    return _finish("mul", av * bv, (a, b), back)


def mul_scalar(a: Tensor, c: float) -> Tensor:
    c_arr = a.data.dtype.type(c)

    def back(g):
        return (g * c_arr,)

    return _finish("mul_scalar", a.data * c_arr, (a,), back)


def conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D convolution over the time axis.

    ``x`` is ``(batch, time, c_in)`` or ``(time, c_in)``; ``w`` is
    ``(kernel, c_in, c_out)``. Output is ``(batch, out_frames, c_out)`` with
    ``out_frames = (time - kernel) // stride + 1``.
    """
    if w.data.ndim != 3 or x.data.ndim not in (2, 3) or x.shape[-1] != w.shape[1]:
        raise _shape_error("conv1d", x.shape, w.shape)
    if stride < 1:
        raise ValueError("conv1d: stride must be >= 1")
    squeeze = x.data.ndim == 2
    xv = x.data[None] if squeeze else x.data
    k, c_in, c_out = w.shape
    n, t, _ = xv.shape
    if t < k:
        raise ShapeError(f"conv1d: input has {t} frames, fewer than kernel size {k}")
    t_out = (t - k) // stride + 1
    # (n, t-k+1, c_in, k) -> strided -> (n, t_out, k, c_in)
    win = np.lib.stride_tricks.sliding_window_view(xv, k, axis=1)[:, ::stride]
    patches = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n * t_out, k * c_in)
    w2 = w.data.reshape(k * c_in, c_out)
    out = (patches @ w2).reshape(n, t_out, c_out)
    if squeeze:
        out = out[0]

    def back(g):
        g2 = g.reshape(n * t_out, c_out)
        gw = (patches.T @ g2).reshape(k, c_in, c_out)
        gp = (g2 @ w2.T).reshape(n, t_out, k, c_in)
        gx = np.zeros_like(xv)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            gx[:, j : j + span : stride, :] += gp[:, :, j, :]
        return (gx[0] if squeeze else gx), gw

    return _finish("conv1d", out, (x, w), back)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    xv = x.data
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))
    out = (xv * cdf).astype(xv.dtype, copy=False)

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return ((g * (cdf + xv * pdf)).astype(xv.dtype, copy=False),)

    return _finish("gelu", out, (x,), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def back(g):
        return (g * mask,)

    return _finish("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), back)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _finish("softmax", s, (x,), back)


def log_softmax(x: Tensor) -> Tensor:
    """Max-subtracted log-softmax over the last axis (fused for stability)."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _finish("log_softmax", out, (x,), back)


def log(x: Tensor) -> Tensor:
    xv = x.data

    def back(g):
        return (g / xv,)

    return _finish("log", np.log(xv), (x,), back)


def abs_(x: Tensor) -> Tensor:
    xv = x.data

    def back(g):
        return (g * np.sign(xv),)

    return _finish("abs", np.abs(xv), (x,), back)


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    xv = x.data
    out = np.asarray(xv.sum(axis=axis), dtype=xv.dtype)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), xv.shape),)

    return _finish("sum", out, (x,), back)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    xv = x.data
    count = xv.size if axis is None else xv.shape[axis]
    out = np.asarray(xv.mean(axis=axis), dtype=xv.dtype)
    scale = xv.dtype.type(1.0 / count)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g * scale, xv.shape),)
        return (np.broadcast_to(np.expand_dims(g * scale, axis), xv.shape),)

    return _finish("mean", out, (x,), back)


def mean_pool_time(x: Tensor) -> Tensor:
    """Average over the time axis (second to last): ``(..., T, C) -> (..., C)``."""
    if x.data.ndim < 2:
        raise ShapeError(f"mean_pool_time: need (..., time, channels), got {x.shape}")
    return mean(x, axis=x.data.ndim - 2)


def gather_rows(table: Tensor, index) -> Tensor:
    """``table[index]`` for an integer index array of any shape."""
    idx = np.asarray(index)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather_rows: index must be an integer array")
    n = table.shape[0] if table.data.ndim else 0
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for table of {n} rows")
    tv = table.data
    out = tv[idx]

    def back(g):
        if tv.ndim == 1:
            gt = np.bincount(idx.ravel(), weights=g.ravel(), minlength=n)
            return (gt.astype(tv.dtype, copy=False),)
        gt = np.zeros_like(tv)
        np.add.at(gt, idx.ravel(), g.reshape(-1, *tv.shape[1:]))
        return (gt,)

    return _finish("gather_rows", out, (table,), back)


_DISPATCH = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "mul_scalar": mul_scalar,
    "conv1d": conv1d,
    "gelu": gelu,
    "relu": relu,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "log": log,
    "abs": abs_,
    "sum": sum_,
    "mean": mean,
    "mean_pool_time": mean_pool_time,
    "gather_rows": gather_rows,
}


def primitive_forward(op_kind: str, *inputs, **params) -> Tensor:
    """Apply the named primitive. Extra keyword arguments are op parameters."""
    try:
        fn = _DISPATCH[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **params)


class GradCheck(NamedTuple):
    max_rel_error: float
    excluded: tuple[int, ...]


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-6,
    kink_tol: float = 1e-3,
) -> GradCheck:
    """Compare the taped gradient of scalar ``f`` at ``x`` with central differences.

    The error per coordinate is ``|auto - numeric| / max(1, |auto|)``.
    Coordinates whose one-sided differences disagree by more than
    ``kink_tol`` sit on a kink (abs, relu) and are reported in ``excluded``
    instead of counting toward the error.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=x.dtype)
    leaf = Tensor(base, requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    f0 = float(y.data.reshape(-1)[0])
    if not math.isfinite(f0):
        raise NumericalError("finite_diff_check: f(x) is not finite")
    tape.backward(y)
    auto = np.zeros_like(base) if leaf.grad is None else leaf.grad

    def ev(arr):
        return float(f(Tensor._wrap(arr)).data.reshape(-1)[0])

    worst = 0.0
    excluded = []
    flat = base.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        fp, fm = ev(plus.reshape(base.shape)), ev(minus.reshape(base.shape))
        numeric = (fp - fm) / (2 * eps)
        a = float(auto.reshape(-1)[i])
        if abs((fp - f0) - (f0 - fm)) / eps > kink_tol * max(1.0, abs(numeric)):
            excluded.append(i)
            continue
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return GradCheck(worst, tuple(excluded))
