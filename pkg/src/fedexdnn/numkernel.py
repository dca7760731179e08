"""Dense float64 tensors with a reverse-mode gradient tape.

Operations record themselves on the innermost active :class:`GradTape` of the
current thread whenever one of their inputs requires a gradient.  Outside a tape
every operation is a plain numpy computation, which is what inference uses.

    >>> x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    >>> with GradTape() as tape:
    ...     y = (x * x).sum()
    >>> tape.gradient(y, [x])[0]
    array([2., 4.])
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64
LOG_EPS = 1e-12


class KernelError(ValueError):
    """Base class for contract violations raised by tensor operations."""


class ShapeError(KernelError):
    pass


class DegenerateInputError(KernelError):
    pass


class Tensor:
    """An immutable float64 array, optionally tracked for gradients."""

    __slots__ = ("value", "requires_grad", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=DTYPE, copy=True)
        arr.setflags(write=False)
        self.value = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=DTYPE).view()  # freeze a view, never the caller's array
        arr.setflags(write=False)
        t.value = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.value)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.value!r}{flag})"

    def __len__(self) -> int:
        return self.value.shape[0]

    # arithmetic sugar
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

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=DTYPE))


# ---------------------------------------------------------------------------
# tape


class _TapeStack(threading.local):
    def __init__(self):
        self.stack: list[GradTape] = []


_tapes = _TapeStack()


class GradTape:
    """Ordered record of primitive operations for one backward pass.

    A tape belongs to the thread that opened it and must not be shared.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "GradTape":
        _tapes.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.stack.pop()

    def gradient(self, target: Tensor, sources: Sequence[Tensor] | Mapping[str, Tensor]):
        """Backpropagate a scalar ``target`` to ``sources``.

        Returns arrays in the same container layout as ``sources``.  Sources the
        target does not depend on receive exact zeros.
        """
        if target.value.size != 1:
            raise ShapeError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.value)}
        for out, parents, backward in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        def lookup(t: Tensor) -> np.ndarray:
            g = grads.get(id(t))
            return np.zeros_like(t.value) if g is None else np.array(g, dtype=DTYPE).reshape(t.shape)

        if isinstance(sources, Mapping):
            return {k: lookup(t) for k, t in sources.items()}
        return [lookup(t) for t in sources]


def _record(value: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor._wrap(value)
    if _tapes.stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        _tapes.stack[-1].nodes.append((out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise KernelError(f"{op} produced non-finite values")


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from exc
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from exc
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.value * b.value
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from exc
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if np.any(b.value == 0):
        raise DegenerateInputError("div: zero denominator")
    out = a.value / b.value
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.value, a.shape),
            _unbroadcast(-g * out / b.value, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a.value @ b.value
    return _record(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = expit(a.value)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return _record(a.value * mask, (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    _check_finite(out, "exp")
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.value <= 0):
        raise DegenerateInputError("log: non-positive input")
    return _record(np.log(a.value), (a,), lambda g: (g / a.value,))


def softplus(a) -> Tensor:
    """Stable ``log(1 + exp(x))``."""
    a = as_tensor(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    grad = expit(x)
    return _record(out, (a,), lambda g: (g * grad,))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def normalize(a, axis: int = -1) -> Tensor:
    """Scale to unit L2 norm along ``axis``; zero-norm slices are an error."""
    a = as_tensor(a)
    norm = np.sqrt((a.value * a.value).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("normalize: zero-norm input")
    out = a.value / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record(out, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, ts, backward)


def take(a, index) -> Tensor:
    """Basic or fancy indexing (``a[index]``)."""
    a = as_tensor(a)
    out = a.value[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, slice)) or p is None or p is Ellipsis for p in parts)

    def backward(g):
        full = np.zeros_like(a.value)
        if basic:
            full[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from exc
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.value, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _record(out, (a,), lambda g: (np.transpose(g, inverse),))


def lstm_sequence(x, w_x, w_h, b, reverse: bool = False) -> Tensor:
    """One LSTM layer over a whole sequence as a single tape node.

    ``x`` is (T, n, f); weights are (f, 4h), (h, 4h), (4h,) with gate blocks in
    the order input, forget, cell, output.  Zero initial state.  With
    ``reverse`` the recurrence runs from the last step to the first, and the
    output stays aligned with the input's time order.  Returns (T, n, h).
    The backward pass is hand-written backpropagation through time.
    """
    x, w_x, w_h, b = (as_tensor(v) for v in (x, w_x, w_h, b))
    if x.ndim != 3 or w_x.ndim != 2 or w_x.shape[0] != x.shape[2]:
        raise ShapeError(f"lstm_sequence: input {x.shape} vs w_x {w_x.shape}")
    hid = w_h.shape[0]
    if w_x.shape[1] != 4 * hid or w_h.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise ShapeError("lstm_sequence: gate weights must have 4*hidden columns")
    T, n, _ = x.shape
    order = range(T - 1, -1, -1) if reverse else range(T)
    xs, wx, wh, bias = x.value, w_x.value, w_h.value, b.value
    H = np.empty((T, n, hid))
    cache = {}
    h = np.zeros((n, hid))
    c = np.zeros((n, hid))
    for t in order:
        z = xs[t] @ wx + h @ wh + bias
        gates = expit(z)
        i, f, o = gates[:, :hid], gates[:, hid:2 * hid], gates[:, 3 * hid:]
        g = np.tanh(z[:, 2 * hid:3 * hid])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        cache[t] = (h, c, i, f, g, o, tc)
        h, c = o * tc, c_new
        H[t] = h

    def backward(dH):
        dx = np.zeros_like(xs)
        dwx, dwh, db = np.zeros_like(wx), np.zeros_like(wh), np.zeros_like(bias)
        dh_next = np.zeros((n, hid))
        dc_next = np.zeros((n, hid))
        for t in reversed(list(order)):
            h_prev, c_prev, i, f, g, o, tc = cache[t]
            dh = dH[t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([dc * g * i * (1.0 - i),
                                 dc * c_prev * f * (1.0 - f),
                                 dc * i * (1.0 - g * g),
                                 do * o * (1.0 - o)], axis=1)
            dwx += xs[t].T @ dz
            dwh += h_prev.T @ dz
            db += dz.sum(axis=0)
            dx[t] = dz @ wx.T
            dh_next = dz @ wh.T
            dc_next = dc * f
        return dx, dwx, dwh, db

    return _record(H, (x, w_x, w_h, b), backward)


# ---------------------------------------------------------------------------
# composites


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity of two vectors (or row-wise for two matrices of equal shape)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: shapes differ {a.shape} vs {b.shape}")
    return sum_(normalize(a) * normalize(b), axis=-1)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarities between rows of ``a`` (n×d) and rows of ``b`` (k×d)."""
    return matmul(normalize(a), transpose(normalize(b)))


def softmax_scaled(logits, gamma=1.0, axis: int = -1) -> Tensor:
    """``exp(gamma*x) / sum(exp(gamma*x))`` along ``axis`` with max subtraction.

    ``gamma`` may be a float or a scalar Tensor (learnable scale).
    """
    logits = as_tensor(logits)
    if not np.all(np.isfinite(logits.value)):
        raise KernelError("softmax_scaled: non-finite logits")
    z = logits * gamma
    shift = np.max(z.value, axis=axis, keepdims=True)
    e = exp(z - shift)  # shift is a constant: softmax is shift invariant
    return e / sum_(e, axis=axis, keepdims=True)


def guarded_log(a, eps: float = LOG_EPS) -> Tensor:
    return log(as_tensor(a) + eps)


# ---------------------------------------------------------------------------
# verification and optimisation helpers


def grad_check(
    fn: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` takes a dict of Tensors shaped like ``params`` and returns a scalar.
    The error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 0 < step <= 1e-3:
        raise ValueError("step must lie in (0, 1e-3]")
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    with GradTape() as tape:
        out = fn(leaves)
    analytic = tape.gradient(out, leaves)

    def evaluate(values):
        return as_tensor(fn({k: Tensor(v) for k, v in values.items()})).item()

    worst = 0.0
    for key, arr in base.items():
        flat = arr.reshape(-1)
        for idx in range(flat.size):
            plus = {k: v.copy() for k, v in base.items()}
            minus = {k: v.copy() for k, v in base.items()}
            plus[key].reshape(-1)[idx] += step
            minus[key].reshape(-1)[idx] -= step
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
            a = analytic[key].reshape(-1)[idx]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


class Adam:
    """Adaptive-moment descent over a dict of named numpy arrays (updated in place)."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float = 0.005,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def leaves(arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Fresh gradient-tracked leaves for a dict of arrays."""
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def stack_values(tensors: Iterable[Tensor]) -> np.ndarray:
    return np.stack([t.value for t in tensors])
