"""Tape-based reverse-mode differentiation over dense float64 arrays.

The op set is deliberately small: add, mul, matmul, tanh, sigmoid, exp, log,
fused softmax cross-entropy, concatenation, slicing and reduction-sum.  Every
forward value and every backward rule goes through :mod:`shortrun.dual`, so
a node's data may itself carry forward-mode tangents.  Running ``grad`` on
inputs that are :class:`~shortrun.dual.Dual` therefore yields gradients whose
tangents are Hessian-vector products, with no second tape involved.

Example:
    >>> g, = grad(lambda z: sum_(z * z), [np.array(3.0)])
    >>> float(g)
    6.0
"""

from __future__ import annotations

import threading

import numpy as np

from . import dual as xp
from .dual import Dual

__all__ = [
    "Value",
    "GradientTape",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softmax_cross_entropy",
    "concat",
    "slice_",
    "sum_",
    "grad",
    "value_and_grad",
    "jvp",
    "constant",
]

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


def _as_data(x):
    if isinstance(x, Dual):
        return x
    return np.asarray(x, dtype=np.float64)


class Value:
    """A node in the computation graph.

    ``data`` is a float64 ndarray or a Dual wrapping one.  ``backward`` maps
    the upstream adjoint to one adjoint per parent (None for parents that do
    not require gradients).
    """

    __slots__ = ("data", "parents", "backward", "requires_grad", "__weakref__")

    def __init__(self, data, parents=(), backward=None, requires_grad=False):
        self.data = _as_data(data)
        self.parents = parents
        self.backward = backward
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return len(self.data.shape)

    @property
    def size(self):
        return int(np.prod(self.data.shape, dtype=np.int64))

    @property
    def numpy(self):
        return xp.primal(self.data)

    def __repr__(self):
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return slice_(self, idx)


def constant(x):
    return x if isinstance(x, Value) else Value(x)


class GradientTape:
    """Ordered record of the nodes created while the tape is active.

    Nodes are appended at creation, so reversed insertion order is a valid
    topological order and each node is visited once.  A tape belongs to the
    thread that entered it.
    """

    def __init__(self):
        self.nodes = []
        self._prev = None

    def __enter__(self):
        self._prev = _active_tape()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        return False

    def watch(self, x):
        v = Value(x, requires_grad=True)
        self.nodes.append(v)
        return v

    def record(self, node):
        self.nodes.append(node)

    def gradient(self, target, sources):
        if target.size != 1:
            raise ValueError(f"gradient target must be scalar, got shape {target.shape}")
        if not xp.isfinite_all(target.data):
            raise FloatingPointError("non-finite value at gradient target")
        adj = {id(target): np.ones(target.shape)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None or node.backward is None:
                if g is not None:
                    adj[id(node)] = g
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = adj.get(key)
                adj[key] = pg if prev is None else xp.add(prev, pg)
        out = []
        for s in sources:
            g = adj.get(id(s))
            if g is None:
                g = np.zeros(s.shape)
            elif not xp.isfinite_all(g):
                raise FloatingPointError("NaN or Inf encountered during backward pass")
            out.append(g)
        return out


def _node(data, parents, backward):
    req = any(p.requires_grad for p in parents)
    tape = _active_tape()
    if req and tape is not None:
        v = Value(data, parents, backward, True)
        tape.record(v)
        return v
    return Value(data)


# ---------------------------------------------------------------------------
# elementary operations


def add(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = xp.unbroadcast(g, sa) if a.requires_grad else None
        gb = xp.unbroadcast(g, sb) if b.requires_grad else None
        return ga, gb

    return _node(xp.add(a.data, b.data), (a, b), backward)


def mul(a, b):
    a, b = constant(a), constant(b)
    da, db = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        ga = xp.unbroadcast(xp.multiply(g, db), sa) if a.requires_grad else None
        gb = xp.unbroadcast(xp.multiply(g, da), sb) if b.requires_grad else None
        return ga, gb

    return _node(xp.multiply(da, db), (a, b), backward)


def neg(a):
    return mul(a, -1.0)


def sub(a, b):
    return add(a, neg(b))


def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    da, db = a.data, b.data

    def backward(g):
        ga = xp.matmul(g, xp.transpose(db)) if a.requires_grad else None
        gb = xp.matmul(xp.transpose(da), g) if b.requires_grad else None
        return ga, gb

    return _node(xp.matmul(da, db), (a, b), backward)


def tanh(a):
    a = constant(a)
    y = xp.tanh(a.data)
    return _node(y, (a,), lambda g: (xp.multiply(g, 1.0 - xp.multiply(y, y)),))


def sigmoid(a):
    a = constant(a)
    y = xp.sigmoid(a.data)
    return _node(y, (a,), lambda g: (xp.multiply(g, xp.multiply(y, 1.0 - y)),))


def exp(a):
    a = constant(a)
    y = xp.exp(a.data)
    return _node(y, (a,), lambda g: (xp.multiply(g, y),))


def log(a):
    a = constant(a)
    d = a.data
    if np.any(xp.primal(d) <= 0):
        raise FloatingPointError("log of non-positive value")
    return _node(xp.log(d), (a,), lambda g: (xp.multiply(g, xp.reciprocal(d)),))


def softmax_cross_entropy(logits, targets):
    """Per-row negative log-probability of ``targets`` under softmax(logits).

    Args:
        logits: (N, V) node.
        targets: (N,) integer array of class ids.

    Returns:
        (N,) node of ``logsumexp(logits) - logits[target]``.
    """
    logits = constant(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} != ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise IndexError("target id out of range")
    rows = np.arange(n)
    d = logits.data
    out = xp.add(xp.logsumexp(d, axis=-1), xp.negative(xp.getitem(d, (rows, targets))))
    onehot = np.zeros((n, v))
    onehot[rows, targets] = 1.0

    def backward(g):
        p = xp.softmax(d, axis=-1)
        return (xp.multiply(xp.add(p, -onehot), xp.reshape(g, (n, 1))),)

    return _node(out, (logits,), backward)


def concat(values, axis=0):
    values = [constant(v) for v in values]
    datas = [v.data for v in values]
    out = xp.concatenate(datas, axis=axis)
    ax = axis % len(xp.primal(out).shape)
    bounds = np.cumsum([0] + [v.shape[ax] for v in values])

    def backward(g):
        grads = []
        for v, lo, hi in zip(values, bounds[:-1], bounds[1:]):
            if not v.requires_grad:
                grads.append(None)
                continue
            idx = (slice(None),) * ax + (slice(lo, hi),)
            grads.append(xp.getitem(g, idx))
        return grads

    return _node(out, tuple(values), backward)


def slice_(a, idx):
    """Basic or integer-array indexing; the backward pass scatter-adds."""
    a = constant(a)
    shape = a.shape
    return _node(xp.getitem(a.data, idx), (a,), lambda g: (xp.scatter(g, shape, idx),))


def sum_(a, axis=None, keepdims=False):
    a = constant(a)
    shape = a.shape
    axes = xp._norm_axes(axis, len(shape))

    def backward(g):
        if not keepdims:
            kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
            g = xp.reshape(g, kept)
        return (xp.broadcast_to(g, shape),)

    return _node(xp.sum(a.data, axis=axes, keepdims=keepdims), (a,), backward)


# ---------------------------------------------------------------------------
# transformations


def value_and_grad(f, inputs):
    """Evaluate scalar ``f(*inputs)`` and its gradient w.r.t. every input.

    Inputs may be ndarrays or Duals; gradients come back in the same kind.
    """
    with GradientTape() as tape:
        vals = [tape.watch(x) for x in inputs]
        out = f(*vals)
    if not isinstance(out, Value):
        out = Value(out)
    return out.data, tape.gradient(out, vals)


def grad(f, inputs):
    """Gradients of scalar-valued ``f`` at ``inputs`` (one per input)."""
    return value_and_grad(f, inputs)[1]


def jvp(f, x, v):
    """Directional derivative ``Df(x) @ v``.

    ``f`` maps an array (or Dual) to an array, Dual or Value.  ``v`` either
    matches ``x``'s shape or stacks several directions on a leading axis, in
    which case one column per direction is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    batched = v.shape != x.shape
    if batched and v.shape[1:] != x.shape:
        raise ValueError(f"direction shape {v.shape} incompatible with {x.shape}")
    tangents = v if batched else v[None]
    out = f(Dual(x, tangents))
    if isinstance(out, Value):
        out = out.data
    t = xp.tangent_of(out, tangents.shape[0])
    return t if batched else t[0]
