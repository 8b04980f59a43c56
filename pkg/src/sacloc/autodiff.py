"""Tape-based reverse-mode differentiation over small dense float64 arrays.

A :class:`Graph` records every operation applied to its tensors in
evaluation order, so the tape is topologically sorted by construction.
:func:`backward` sweeps it in reverse and returns gradients for the named
parameters.

    >>> g = Graph()
    >>> x = g.parameter("x", [3.0])
    >>> loss = sum_(x * x)
    >>> backward(g, loss)["x"]
    array([6.])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, InvalidShapeError

__all__ = [
    "Tensor", "Graph", "backward",
    "add", "sub", "mul", "div", "neg", "scale", "matmul", "outer",
    "conv1d_same", "sigmoid", "softmax", "relu", "exp", "log", "sqrt",
    "sum_", "mean", "column_norm", "logsumexp", "gather", "max_axis0",
    "concat", "reshape", "clip_min",
    "conv1d_same_array", "logsumexp_array", "sigmoid_array", "softmax_array",
]


def _frozen(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > 3:
        raise InvalidShapeError(f"rank {arr.ndim} exceeds 3")
    arr.setflags(write=False)
    return arr


class Tensor:
    """Immutable value attached to a position on a graph's tape."""

    __slots__ = ("value", "graph", "index", "requires_grad")
    # let ndarray <op> Tensor fall through to the reflected methods
    __array_ufunc__ = None

    def __init__(self, value: np.ndarray, graph: "Graph", index: int, requires_grad: bool):
        self.value = value
        self.graph = graph
        self.index = index
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, index={self.index})"

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


class Graph:
    """Operation tape plus a registry of named trainable tensors."""

    def __init__(self):
        self.nodes: list[tuple] = []  # (op name, input indices, vjp or None)
        self.tensors: list[Tensor] = []
        self.parameters: dict[str, Tensor] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, op: str, value, inputs: Sequence[Tensor] = (), vjp: Callable | None = None) -> Tensor:
        value = np.asarray(value, dtype=np.float64)
        if value.flags.writeable:
            value.setflags(write=False)
        needs = any(t.requires_grad for t in inputs)
        t = Tensor(value, self, len(self.nodes), needs)
        self.nodes.append((op, tuple(i.index for i in inputs), vjp if needs else None))
        self.tensors.append(t)
        return t

    def parameter(self, name: str, value) -> Tensor:
        if name in self.parameters:
            raise ContractError(f"duplicate parameter {name!r}")
        t = Tensor(_frozen(value), self, len(self.nodes), True)
        self.nodes.append(("parameter", (), None))
        self.tensors.append(t)
        self.parameters[name] = t
        return t

    def constant(self, value) -> Tensor:
        return self._push("constant", _frozen(value))

    def lift(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise ContractError("tensor belongs to a different graph")
            return x
        return self.constant(x)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise ContractError("operation needs at least one graph tensor")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(graph: Graph, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``loss`` with respect to every parameter.

    Parameters that do not reach the loss receive zeros.
    """
    if loss.graph is not graph:
        raise ContractError("loss node belongs to a different graph")
    if loss.value.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads: list = [None] * len(graph.nodes)
    grads[loss.index] = np.ones_like(loss.value)
    for idx in range(loss.index, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        _, inputs, vjp = graph.nodes[idx]
        if vjp is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not graph.tensors[inp].requires_grad:
                continue
            grads[inp] = gi if grads[inp] is None else grads[inp] + gi
    out = {}
    for name, t in graph.parameters.items():
        g = grads[t.index]
        out[name] = np.zeros_like(t.value) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape)
    return out


# ----------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting, gradients summed back)

def add(x, y) -> Tensor:
    g = _graph_of(x, y)
    x, y = g.lift(x), g.lift(y)
    return g._push("add", x.value + y.value, (x, y),
                   lambda gr: (_unbroadcast(gr, x.shape), _unbroadcast(gr, y.shape)))


def sub(x, y) -> Tensor:
    g = _graph_of(x, y)
    x, y = g.lift(x), g.lift(y)
    return g._push("sub", x.value - y.value, (x, y),
                   lambda gr: (_unbroadcast(gr, x.shape), -_unbroadcast(gr, y.shape)))


def mul(x, y) -> Tensor:
    g = _graph_of(x, y)
    x, y = g.lift(x), g.lift(y)
    return g._push("mul", x.value * y.value, (x, y),
                   lambda gr: (_unbroadcast(gr * y.value, x.shape), _unbroadcast(gr * x.value, y.shape)))


def div(x, y) -> Tensor:
    g = _graph_of(x, y)
    x, y = g.lift(x), g.lift(y)
    out = x.value / y.value
    return g._push("div", out, (x, y),
                   lambda gr: (_unbroadcast(gr / y.value, x.shape),
                               _unbroadcast(-gr * out / y.value, y.shape)))


def neg(x: Tensor) -> Tensor:
    return x.graph._push("neg", -x.value, (x,), lambda gr: (-gr,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return x.graph._push("scale", x.value * c, (x,), lambda gr: (gr * c,))


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor) elementwise; the gradient is zero where the floor is active."""
    mask = x.value >= floor
    return x.graph._push("clip_min", np.where(mask, x.value, floor), (x,), lambda gr: (gr * mask,))


# ----------------------------------------------------------------------
# linear algebra

def matmul(x, y) -> Tensor:
    g = _graph_of(x, y)
    x, y = g.lift(x), g.lift(y)
    if x.value.ndim != 2 or y.value.ndim != 2 or x.shape[1] != y.shape[0]:
        raise InvalidShapeError(f"matmul of {x.shape} and {y.shape}")
    return g._push("matmul", x.value @ y.value, (x, y),
                   lambda gr: (gr @ y.value.T, x.value.T @ gr))


def outer(x, y) -> Tensor:
    """Outer product of two tensors viewed as flat vectors."""
    g = _graph_of(x, y)
    x, y = g.lift(x), g.lift(y)
    a, b = x.value.ravel(), y.value.ravel()
    return g._push("outer", np.multiply.outer(a, b), (x, y),
                   lambda gr: ((gr @ b).reshape(x.shape), (a @ gr).reshape(y.shape)))


def conv1d_same_array(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' cross-correlation without a graph.

    ``out[c, t] = b[c] + sum_{i,k} w[c, i, k] * x[i, t + k - (K - 1) // 2]``
    """
    cols = _im2col(x, w)
    return (w.reshape(w.shape[0], -1) @ cols.reshape(-1, x.shape[1])) + b[:, None]


def _im2col(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or w.ndim != 3:
        raise InvalidShapeError(f"conv1d expects C_in x T input and C_out x C_in x K weights, got {x.shape}, {w.shape}")
    c_in, t = x.shape
    if w.shape[1] != c_in:
        raise InvalidShapeError(f"weights expect {w.shape[1]} input channels, input has {c_in}")
    k = w.shape[2]
    if k % 2 == 0:
        raise InvalidShapeError(f"kernel size must be odd, got {k}")
    pad = (k - 1) // 2
    xp = np.pad(x, ((0, 0), (pad, pad)))
    return sliding_window_view(xp, t, axis=1)  # (C_in, K, T)


def conv1d_same(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    g = _graph_of(x, w, b)
    x, w, b = g.lift(x), g.lift(w), g.lift(b)
    if b.value.shape != (w.shape[0],):
        raise InvalidShapeError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    cols = _im2col(x.value, w.value)
    c_out, c_in, k = w.shape
    t = x.shape[1]
    flat = cols.reshape(c_in * k, t)
    w2 = w.value.reshape(c_out, c_in * k)
    out = w2 @ flat + b.value[:, None]
    pad = (k - 1) // 2

    def vjp(gr):
        gw = (gr @ flat.T).reshape(w.shape) if w.requires_grad else None
        gb = gr.sum(axis=1) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ gr).reshape(c_in, k, t)
            gxp = np.zeros((c_in, t + 2 * pad))
            for j in range(k):
                gxp[:, j:j + t] += gcols[:, j, :]
            gx = gxp[:, pad:pad + t]
        return gx, gw, gb

    return g._push("conv1d_same", out, (x, w, b), vjp)


# ----------------------------------------------------------------------
# nonlinearities

def sigmoid_array(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_array(x.value)
    return x.graph._push("sigmoid", s, (x,), lambda gr: (gr * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return x.graph._push("relu", x.value * mask, (x,), lambda gr: (gr * mask,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.value)
    return x.graph._push("exp", e, (x,), lambda gr: (gr * e,))


def log(x: Tensor) -> Tensor:
    v = x.value
    return x.graph._push("log", np.log(v), (x,), lambda gr: (gr / v,))


def sqrt(x: Tensor) -> Tensor:
    r = np.sqrt(x.value)
    # subgradient 0 at the origin keeps ||0|| differentiable in practice
    half_inv = np.divide(0.5, r, out=np.zeros_like(r), where=r > 0)
    return x.graph._push("sqrt", r, (x,), lambda gr: (gr * half_inv,))


def softmax_array(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = 0) -> Tensor:
    s = softmax_array(x.value, axis)

    def vjp(gr):
        return (s * (gr - (gr * s).sum(axis=axis, keepdims=True)),)

    return x.graph._push("softmax", s, (x,), vjp)


def logsumexp_array(z: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    if z.shape[axis] == 0:
        raise InvalidShapeError("logsumexp over an empty axis")
    m = z.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def logsumexp(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    out_k = logsumexp_array(x.value, axis, keepdims=True)
    weights = np.exp(x.value - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def vjp(gr):
        if not keepdims:
            gr = np.expand_dims(gr, axis)
        return (gr * weights,)

    return x.graph._push("logsumexp", out, (x,), vjp)


# ----------------------------------------------------------------------
# reductions and indexing

def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def vjp(gr):
        if axis is not None and not keepdims:
            gr = np.expand_dims(gr, axis)
        return (np.broadcast_to(gr, shape),)

    return x.graph._push("sum", x.value.sum(axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def column_norm(x: Tensor) -> Tensor:
    """Euclidean norm of every column of a matrix."""
    r = np.sqrt((x.value ** 2).sum(axis=0))
    safe = np.where(r > 0, r, 1.0)
    return x.graph._push("column_norm", r, (x,), lambda gr: (x.value * (gr / safe)[None, :],))


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Select entries along ``axis``; indices are constants of the graph."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = x.shape

    def vjp(gr):
        out = np.zeros(shape)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, idx, np.moveaxis(gr, axis, 0))
        return (out,)

    return x.graph._push("gather", np.take(x.value, idx, axis=axis), (x,), vjp)


def max_axis0(x: Tensor) -> Tensor:
    """Max over the leading (modality) axis; ties go to the lower row."""
    arg = np.argmax(x.value, axis=0)
    cols = np.arange(x.shape[1])
    shape = x.shape

    def vjp(gr):
        out = np.zeros(shape)
        out[arg, cols] = gr
        return (out,)

    return x.graph._push("max_axis0", x.value[arg, cols], (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    g = _graph_of(*xs)
    xs = [g.lift(x) for x in xs]
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(gr):
        return tuple(np.split(gr, bounds, axis=axis))

    return g._push("concat", np.concatenate([x.value for x in xs], axis=axis), xs, vjp)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    old = x.shape
    return x.graph._push("reshape", x.value.reshape(shape), (x,), lambda gr: (gr.reshape(old),))
