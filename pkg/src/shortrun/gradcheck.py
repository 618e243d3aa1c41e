"""Central finite-difference checks for the autodiff op set."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def numeric_grad(f, inputs, h=1e-5):
    """Central differences of scalar ``f(*inputs)`` (plain numpy) w.r.t. each input."""
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    grads = []
    for i, x in enumerate(inputs):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            old = x[idx]
            x[idx] = old + h
            hi = f(*inputs)
            x[idx] = old - h
            lo = f(*inputs)
            x[idx] = old
            g[idx] = (hi - lo) / (2 * h)
        grads.append(g)
    return grads


def _weighted(op, weights):
    """Scalar test function sum(w * op(...)) on Values."""

    def f(*vals):
        return ad.sum_(ad.mul(op(*vals), weights))

    return f


def _plain(f):
    def g(*arrays):
        return float(f(*[ad.Value(a) for a in arrays]).numpy)

    return g


TARGETS = np.array([2, 0, 1])
IDX = np.array([2, 0, 2])


def op_cases():
    """(name, op on Values, input shapes, sampler for one input) for every elementary op."""

    def normal(rng, shape):
        return rng.standard_normal(shape)

    def positive(rng, shape):
        return rng.uniform(0.2, 3.0, shape)

    return [
        ("add", ad.add, [(3, 2), (2,)], normal),
        ("mul", ad.mul, [(3, 2), (3, 2)], normal),
        ("sub", ad.sub, [(3, 2), (3, 1)], normal),
        ("neg", ad.neg, [(4,)], normal),
        ("matmul", ad.matmul, [(3, 4), (4, 2)], normal),
        ("tanh", ad.tanh, [(3, 2)], normal),
        ("sigmoid", ad.sigmoid, [(3, 2)], normal),
        ("exp", ad.exp, [(3, 2)], normal),
        ("log", ad.log, [(3, 2)], positive),
        ("softmax_cross_entropy", lambda a: ad.softmax_cross_entropy(a, TARGETS), [(3, 4)], normal),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [(3, 2), (3, 1)], normal),
        ("slice", lambda a: ad.slice_(a, (slice(None), slice(1, 3))), [(3, 4)], normal),
        ("gather", lambda a: ad.slice_(a, IDX), [(3, 2)], normal),
        ("sum", lambda a: ad.sum_(a, axis=0), [(3, 4)], normal),
    ]


def check_op(name, op, shapes, sampler, rng, points=100, h=1e-5):
    """Worst relative error (norm-wise) of the reverse-mode gradient over random points."""
    out_shape = np.shape(op(*[ad.Value(np.ones(s)) for s in shapes]).numpy)
    worst = 0.0
    for _ in range(points):
        xs = [sampler(rng, s) for s in shapes]
        w = rng.standard_normal(out_shape)
        f = _weighted(op, w)
        got = ad.grad(f, xs)
        ref = numeric_grad(_plain(f), xs, h)
        for g, r in zip(got, ref):
            scale = max(np.linalg.norm(r), np.linalg.norm(g), 1e-8)
            worst = max(worst, float(np.linalg.norm(np.asarray(g) - r) / scale))
    return worst


def check_all(seed=0, points=100):
    rng = np.random.default_rng(seed)
    return {name: check_op(name, op, shapes, sampler, rng, points)
            for name, op, shapes, sampler in op_cases()}
