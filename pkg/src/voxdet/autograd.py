"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

The op set is exactly what the detection network needs; there is no view
tracking and broadcasting follows numpy's own rules. Each op records a
closure mapping the upstream gradient to per-parent gradients; `backward`
walks the tape once in reverse topological order and deposits gradients on
leaf values that require them. Gradients accumulate across backward calls
until explicitly reset.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Value:
    """A dense array plus an optional place on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(np.asarray(x))


def constant(x) -> Value:
    return Value(np.asarray(x), requires_grad=False)


def _make(data, parents, backward) -> Value:
    out = Value(data)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    grad = np.asarray(grad)
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops: each backward closure returns one gradient per parent


def add(a, b):
    a, b = as_value(a), as_value(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b):
    a, b = as_value(a), as_value(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b):
    a, b = as_value(a), as_value(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.data.shape),
                            _unbroadcast(g * a.data, b.data.shape)))


def div(a, b):
    a, b = as_value(a), as_value(b)
    data = a.data / b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.data.shape),
                            _unbroadcast(-g * data / b.data, b.data.shape)))


def neg(a):
    a = as_value(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    a, b = as_value(a), as_value(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul expects 2D operands")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def relu(a):
    a = as_value(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def absolute(a):
    a = as_value(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a):
    a = as_value(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a):
    a = as_value(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a):
    a = as_value(a)
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * (0.5 / data),))


def power(a, exponent: float):
    a = as_value(a)
    return _make(a.data ** exponent, (a,),
                 lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def sigmoid(a):
    a = as_value(a)
    data = np.where(a.data >= 0,
                    1.0 / (1.0 + np.exp(-np.abs(a.data))),
                    np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    return _make(data, (a,), lambda g: (g * data * (1.0 - data),))


def logsigmoid(a):
    """log(sigmoid(x)), computed stably as -logaddexp(0, -x)."""
    a = as_value(a)
    data = -np.logaddexp(0.0, -a.data)
    return _make(data, (a,),
                 lambda g: (g * np.exp(-np.logaddexp(0.0, a.data)),))


def minimum(a, b):
    a, b = as_value(a), as_value(b)
    take_a = a.data <= b.data  # ties route to the first argument
    return _make(np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.data.shape),
                            _unbroadcast(g * ~take_a, b.data.shape)))


def maximum(a, b):
    a, b = as_value(a), as_value(b)
    take_a = a.data >= b.data
    return _make(np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * take_a, a.data.shape),
                            _unbroadcast(g * ~take_a, b.data.shape)))


def vsum(a, axis=None):
    a = as_value(a)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), bw)


def vmean(a, axis=None):
    a = as_value(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(vsum(a, axis=axis), 1.0 / max(n, 1))


def rows(a, idx):
    """Gather rows of a 2D array; gradient scatters back with accumulation."""
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), bw)


def rows_padded(a, idx, found):
    """Gather rows where found, zero rows elsewhere; grad mirrors the gather."""
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.int64)
    found = np.asarray(found, dtype=bool)
    data = np.zeros((len(idx), a.data.shape[1]), dtype=a.data.dtype)
    data[found] = a.data[idx[found]]

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx[found], g[found])
        return (ga,)

    return _make(data, (a,), bw)


def column(a, j):
    """Column j of a 2D array as a 1D value."""
    a = as_value(a)

    def bw(g):
        ga = np.zeros_like(a.data)
        ga[:, j] = g
        return (ga,)

    return _make(a.data[:, j].copy(), (a,), bw)


def stack_columns(cols):
    """Stack 1D values into an (N, len(cols)) array value."""
    cols = [as_value(c) for c in cols]
    data = np.stack([c.data for c in cols], axis=1)
    return _make(data, tuple(cols),
                 lambda g: tuple(g[:, j] for j in range(len(cols))))


def concat_rows(parts):
    """Concatenate 2D values along rows."""
    parts = [as_value(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=0)
    bounds = np.cumsum([0] + [len(p.data) for p in parts])
    return _make(data, tuple(parts),
                 lambda g: tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts))))


def kernel_map_conv(feats, weights, bias, kmap, n_out: int):
    """Differentiable gather/matmul/scatter convolution over a KernelMap.

    feats (N_in, C_in), weights (K^3, C_in, C_out) and optional bias
    (C_out,) are Values; the kernel map is constant geometry. The same op
    drives the generative transposed convolution via a transposed map.
    """
    feats, weights = as_value(feats), as_value(weights)
    bias = None if bias is None else as_value(bias)
    c_out = weights.data.shape[2]
    data = np.zeros((n_out, c_out), dtype=feats.data.dtype)
    w = weights.data.astype(feats.data.dtype, copy=False)
    for m, (in_rows, out_rows) in enumerate(kmap.pairs):
        if len(in_rows):
            data[out_rows] += feats.data[in_rows] @ w[m]
    if bias is not None:
        data += bias.data.astype(data.dtype, copy=False)

    def bw(g):
        gf = np.zeros_like(feats.data)
        gw = np.zeros_like(weights.data)
        for m, (in_rows, out_rows) in enumerate(kmap.pairs):
            if len(in_rows):
                gf[in_rows] += g[out_rows] @ w[m].T
                gw[m] += feats.data[in_rows].T @ g[out_rows]
        if bias is None:
            return (gf, gw)
        return (gf, gw, g.sum(axis=0))

    parents = (feats, weights) if bias is None else (feats, weights, bias)
    return _make(data, parents, bw)


# ---------------------------------------------------------------------------
# backward driver


def backward(root: Value):
    """Populate .grad on all leaf values reachable from a scalar root."""
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.accumulate_grad(g)
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            if p._backward is None and not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
