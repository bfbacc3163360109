"""Small dense reverse-mode autodiff over float64 numpy arrays.

Every primitive that touches a tensor with ``requires_grad`` appends a node
to the current :class:`Tape`. Nodes are appended in execution order, which
is already a topological order, so :func:`backward` is a single reverse
sweep. Training code opens a fresh tape per step::

    with Tape():
        loss = l1_loss(model(x), y)
        backward(loss)
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeError(ValueError):
    pass


class GradientError(RuntimeError):
    pass


class Tape:
    """Ordered record of primitive applications within one training context."""

    def __init__(self):
        self.nodes = []

    def record(self, out, parents, vjp):
        out._node = len(self.nodes)
        out._tape = self
        self.nodes.append((out, parents, vjp))

    def clear(self):
        for out, _, _ in self.nodes:
            out._tape = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        self.clear()


_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = [Tape()]
    return _local.tapes


def current_tape() -> Tape:
    return _stack()[-1]


class no_grad:
    """Context in which primitives record nothing (inference)."""

    def __enter__(self):
        self._prev = getattr(_local, "disabled", False)
        _local.disabled = True

    def __exit__(self, *exc):
        _local.disabled = self._prev


class Tensor:
    """Immutable float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "_tape", "_done")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        a = np.array(data, dtype=np.float64)
        a.setflags(write=False)
        self.data = a
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self._node = None
        self._tape = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def zero_grad(self):
        self.grad = None

    def assign(self, values, copy=True):
        """Replace the values of a leaf tensor (used by optimizers).

        With ``copy=False`` a float64 array is adopted as-is and frozen.
        """
        a = np.array(values, dtype=np.float64) if copy else np.asarray(values, dtype=np.float64)
        if a.shape != self.data.shape:
            raise ShapeError(f"cannot assign shape {a.shape} to tensor of shape {self.shape}")
        a.setflags(write=False)
        self.data = a

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __getitem__(self, key):
        return take(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, vjp) -> Tensor:
    """Wrap ``value``; record on the tape when any parent needs a gradient."""
    out = Tensor.__new__(Tensor)
    value = np.asarray(value, dtype=np.float64)
    value.setflags(write=False)
    out.data = value
    out.grad = None
    out.name = None
    out._node = None
    out._tape = None
    out._done = False
    out.requires_grad = (not getattr(_local, "disabled", False)
                         and any(p.requires_grad for p in parents))
    if out.requires_grad:
        current_tape().record(out, parents, vjp)
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ------------------------------------------------------------------ primitives

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return _result(a.data @ b.data, (a, b),
                   lambda g: (g @ b.data.T if a.requires_grad else None,
                              a.data.T @ g if b.requires_grad else None))


def add_bias(x, b) -> Tensor:
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim != 2 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: shapes {x.shape} and {b.shape} are not compatible")
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))  # keeps NaN


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign to avoid overflow in exp
    z = np.exp(-np.abs(x.data))
    s = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),))


def abs(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: nothing to concatenate")
    ax = axis % ts[0].data.ndim
    for t in ts[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        ref = [s for i, s in enumerate(ts[0].shape) if i != ax]
        if t.data.ndim != ts[0].data.ndim or other != ref:
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
                     for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), vjp)


def take(x, key) -> Tensor:
    """Basic-slicing view ``x[key]`` (copied); gradient scatters back."""
    x = as_tensor(x)
    out = x.data[key]

    def vjp(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return _result(np.array(out), (x,), vjp)


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for shape {x.shape}")
    return take(x, (Ellipsis, slice(start, stop)))


def sum(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _result(x.data.sum(), (x,), lambda g: (np.full(x.shape, float(g)),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return _result(x.data.mean(), (x,), lambda g: (np.full(x.shape, float(g) / n),))


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error over all entries; subgradient ``sign(0) = 0``."""
    pred, target = as_tensor(pred), as_tensor(target)
    _same_shape("l1_loss", pred, target)
    diff = pred.data - target.data
    n = diff.size
    s = np.sign(diff)
    return _result(np.abs(diff).mean(), (pred, target),
                   lambda g: (s * (float(g) / n), -s * (float(g) / n)))


def weighted_sum(terms, weights) -> Tensor:
    """``sum_k weights[k] * terms[k]`` over scalar tensors."""
    terms = [as_tensor(t) for t in terms]
    w = [float(v) for v in weights]
    if len(terms) != len(w) or not terms:
        raise ShapeError("weighted_sum: need one weight per term")
    value = np.sum([wk * t.data for wk, t in zip(w, terms)])
    return _result(value, tuple(terms), lambda g: tuple(float(g) * wk for wk in w))


# ------------------------------------------------------------------- backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
    if loss.data.ndim != 0 and loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise GradientError("backward called twice on the same loss without a new tape")
    if not loss.requires_grad:
        raise GradientError("loss does not depend on any tensor requiring grad")
    tape = loss._tape
    if tape is None:
        raise GradientError("the tape holding this loss was cleared")
    adj = {loss._node: np.ones_like(loss.data)}
    for i in range(loss._node, -1, -1):
        g = adj.pop(i, None)
        if g is None:
            continue
        _, parents, vjp = tape.nodes[i]
        for p, gp in zip(parents, vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            if p._node is not None and p._tape is tape:
                adj[p._node] = adj[p._node] + gp if p._node in adj else gp
            else:
                p.grad = gp.copy() if p.grad is None else p.grad + gp
    loss._done = True


# ----------------------------------------------------------------------- LSTM

def lstm_cell(x_t, h_prev, c_prev, W, b):
    """One LSTM step with gates packed as ``[input, forget, candidate, output]``.

    ``W`` has shape ``(d_in + d_h, 4 d_h)`` and ``b`` shape ``(4 d_h,)``.
    Returns ``(h_t, c_t)``.
    """
    x_t, h_prev, c_prev, W, b = map(as_tensor, (x_t, h_prev, c_prev, W, b))
    d_h = h_prev.shape[-1]
    if W.shape != (x_t.shape[-1] + d_h, 4 * d_h) or b.shape != (4 * d_h,):
        raise ShapeError(f"lstm_cell: W {W.shape} / b {b.shape} do not fit input "
                         f"{x_t.shape[-1]} and hidden {d_h}")
    if c_prev.shape != h_prev.shape or x_t.shape[0] != h_prev.shape[0]:
        raise ShapeError(f"lstm_cell: state shapes {h_prev.shape}, {c_prev.shape} "
                         f"do not fit input {x_t.shape}")
    z = add_bias(matmul(concat([x_t, h_prev]), W), b)
    i = sigmoid(slice_cols(z, 0, d_h))
    f = sigmoid(slice_cols(z, d_h, 2 * d_h))
    g = tanh(slice_cols(z, 2 * d_h, 3 * d_h))
    o = sigmoid(slice_cols(z, 3 * d_h, 4 * d_h))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c
