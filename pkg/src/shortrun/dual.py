"""Forward-mode tangents carried alongside numpy arrays.

A :class:`Dual` holds a primal array and a stack of ``n`` tangent arrays
(leading axis), so one evaluation pushes ``n`` directional derivatives at
once.  The module-level functions accept plain ndarrays or Duals and return
the same kind; the reverse-mode tape uses them for both its forward values
and its backward rules, which is what makes forward-over-reverse work.
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("primal", "tangent")
    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, primal, tangent):
        self.primal = np.asarray(primal, dtype=np.float64)
        tangent = np.asarray(tangent, dtype=np.float64)
        if tangent.shape[1:] != self.primal.shape:
            raise ValueError(
                f"tangent shape {tangent.shape} does not match primal {self.primal.shape}"
            )
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    @property
    def ndim(self):
        return self.primal.ndim

    @property
    def size(self):
        return self.primal.size

    @property
    def n_dirs(self):
        return self.tangent.shape[0]

    def lifted(self, ndim):
        """Tangent reshaped so it broadcasts against an ``ndim`` primal."""
        extra = ndim - self.ndim
        if extra <= 0:
            return self.tangent
        t = self.tangent
        return t.reshape((t.shape[0],) + (1,) * extra + self.primal.shape)

    def __repr__(self):
        return f"Dual(shape={self.shape}, n_dirs={self.n_dirs})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, negative(other))

    def __rsub__(self, other):
        return add(other, negative(self))

    def __mul__(self, other):
        return multiply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return multiply(self, reciprocal(other))
        return multiply(self, 1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return multiply(other, reciprocal(self))

    def __neg__(self):
        return negative(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def primal(x):
    return x.primal if isinstance(x, Dual) else x


def tangent_of(x, n_dirs=None):
    """Tangent stack of ``x``; zeros when ``x`` is a plain array."""
    if isinstance(x, Dual):
        return x.tangent
    x = np.asarray(x, dtype=np.float64)
    return np.zeros((n_dirs,) + x.shape)


def _n_dirs(*xs):
    for x in xs:
        if isinstance(x, Dual):
            return x.n_dirs
    return None


def _full(t, n, shape):
    if t.shape != (n,) + shape:
        t = np.broadcast_to(t, (n,) + shape).copy()
    return t


def add(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.add(a, b)
    pa, pb = primal(a), primal(b)
    out = np.add(pa, pb)
    t = None
    for x in (a, b):
        if isinstance(x, Dual):
            lt = x.lifted(out.ndim)
            t = lt if t is None else t + lt
    return Dual(out, _full(t, _n_dirs(a, b), out.shape))


def negative(a):
    if isinstance(a, Dual):
        return Dual(-a.primal, -a.tangent)
    return np.negative(a)


def multiply(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.multiply(a, b)
    pa, pb = primal(a), primal(b)
    out = np.multiply(pa, pb)
    t = None
    if isinstance(a, Dual):
        t = a.lifted(out.ndim) * pb
    if isinstance(b, Dual):
        tb = pa * b.lifted(out.ndim)
        t = tb if t is None else t + tb
    return Dual(out, _full(t, _n_dirs(a, b), out.shape))


def reciprocal(a):
    if isinstance(a, Dual):
        r = 1.0 / a.primal
        return Dual(r, -a.tangent * (r * r))
    return 1.0 / a


def matmul(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.matmul(a, b)
    pa, pb = primal(a), primal(b)
    out = np.matmul(pa, pb)
    t = None
    if isinstance(a, Dual):
        t = np.matmul(a.tangent, pb)
    if isinstance(b, Dual):
        tb = np.matmul(pa, b.tangent)
        t = tb if t is None else t + tb
    return Dual(out, _full(t, _n_dirs(a, b), out.shape))


def transpose(a):
    if isinstance(a, Dual):
        return Dual(a.primal.T, np.swapaxes(a.tangent, -1, -2))
    return np.transpose(a)


def tanh(a):
    if isinstance(a, Dual):
        y = np.tanh(a.primal)
        return Dual(y, a.tangent * (1.0 - y * y))
    return np.tanh(a)


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    if isinstance(a, Dual):
        y = _sigmoid(a.primal)
        return Dual(y, a.tangent * (y * (1.0 - y)))
    return _sigmoid(np.asarray(a, dtype=np.float64))


def exp(a):
    if isinstance(a, Dual):
        y = np.exp(a.primal)
        return Dual(y, a.tangent * y)
    return np.exp(a)


def log(a):
    if isinstance(a, Dual):
        return Dual(np.log(a.primal), a.tangent / a.primal)
    return np.log(a)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if isinstance(a, Dual):
        axes = _norm_axes(axis, a.ndim)
        p = np.sum(a.primal, axis=axes, keepdims=keepdims)
        t = np.sum(a.tangent, axis=tuple(ax + 1 for ax in axes), keepdims=keepdims)
        return Dual(p, t)
    return np.sum(a, axis=axis, keepdims=keepdims)


def broadcast_to(a, shape):
    shape = tuple(shape)
    if isinstance(a, Dual):
        p = np.broadcast_to(a.primal, shape)
        t = np.broadcast_to(a.lifted(len(shape)), (a.n_dirs,) + shape)
        return Dual(p, t)
    return np.broadcast_to(a, shape)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    gshape = primal(g).shape
    if gshape == shape:
        return g
    lead = len(gshape) - len(shape)
    axes = list(range(lead))
    for i, n in enumerate(shape):
        if n == 1 and gshape[lead + i] != 1:
            axes.append(lead + i)
    out = sum(g, axis=tuple(axes), keepdims=True) if axes else g
    if lead:
        out = reshape(out, shape)
    elif primal(out).shape != shape:
        out = reshape(out, shape)
    return out


def reshape(a, shape):
    shape = tuple(shape)
    if isinstance(a, Dual):
        return Dual(a.primal.reshape(shape), a.tangent.reshape((a.n_dirs,) + shape))
    return np.reshape(a, shape)


def getitem(a, idx):
    if isinstance(a, Dual):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(a.primal[idx], a.tangent[(slice(None),) + idx])
    return a[idx]


def _has_array_index(idx):
    return any(isinstance(i, (np.ndarray, list)) for i in idx)


def _scatter_into(out, idx, g):
    if _has_array_index(idx):
        np.add.at(out, idx, g)
    else:
        # basic slices never repeat a position
        out[idx] += g


def scatter(g, shape, idx):
    """Adjoint of ``getitem``: zeros of ``shape`` with ``g`` added at ``idx``."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    if isinstance(g, Dual):
        p = np.zeros(shape)
        _scatter_into(p, idx, g.primal)
        t = np.zeros((g.n_dirs,) + tuple(shape))
        _scatter_into(t, (slice(None),) + idx, g.tangent)
        return Dual(p, t)
    out = np.zeros(shape)
    _scatter_into(out, idx, g)
    return out


def concatenate(parts, axis=0):
    n = _n_dirs(*parts)
    if n is None:
        return np.concatenate(parts, axis=axis)
    ps = [primal(p) for p in parts]
    out = np.concatenate(ps, axis=axis)
    ax = axis % out.ndim
    ts = [tangent_of(p, n) for p in parts]
    return Dual(out, np.concatenate(ts, axis=ax + 1))


def softmax(a, axis=-1):
    x = primal(a)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    p = e / np.sum(e, axis=axis, keepdims=True)
    if isinstance(a, Dual):
        t = a.tangent
        ax = axis % a.ndim + 1
        t = p * (t - np.sum(p * t, axis=ax, keepdims=True))
        return Dual(p, t)
    return p


def logsumexp(a, axis=-1):
    x = primal(a)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    if isinstance(a, Dual):
        p = e / s
        ax = axis % a.ndim + 1
        return Dual(out, np.sum(p * a.tangent, axis=ax))
    return out


def where(cond, a, b):
    n = _n_dirs(a, b)
    if n is None:
        return np.where(cond, a, b)
    p = np.where(cond, primal(a), primal(b))
    ta = tangent_of(a, n)
    tb = tangent_of(b, n)
    c = np.asarray(cond)
    t = np.where(c.reshape((1,) + c.shape) if c.ndim else c, ta, tb)
    return Dual(p, _full(t, n, p.shape))


def isfinite_all(a):
    if isinstance(a, Dual):
        return bool(np.all(np.isfinite(a.primal)) and np.all(np.isfinite(a.tangent)))
    return bool(np.all(np.isfinite(a)))
