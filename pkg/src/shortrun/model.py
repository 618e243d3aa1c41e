"""Latent-variable generative models: a standard normal prior with one of two decoders.

``LinearGaussianDecoder`` has a closed-form posterior and marginal and serves
as the oracle model; ``LSTMDecoder`` is the token-level text model, where the
latent code sets the initial recurrent state and is also appended to every
input embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import dual as xp

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# parameters


class ModelParams:
    """Named parameter blocks with a stable flat index.

    Blocks are copied on construction and made read-only, so an instance can be
    shared between threads as a snapshot.
    """

    def __init__(self, blocks):
        self._blocks = {}
        for name, arr in blocks.items():
            a = np.array(arr, dtype=np.float64, copy=True)
            a.setflags(write=False)
            self._blocks[name] = a

    @property
    def names(self):
        return list(self._blocks)

    @property
    def size(self):
        return sum(a.size for a in self._blocks.values())

    def __getitem__(self, name):
        return self._blocks[name]

    def __contains__(self, name):
        return name in self._blocks

    def items(self):
        return self._blocks.items()

    def shapes(self):
        return {k: v.shape for k, v in self._blocks.items()}

    def flat(self):
        if not self._blocks:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._blocks.values()])

    def unflatten(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.size,):
            raise ValueError(f"flat vector has shape {vec.shape}, expected ({self.size},)")
        out, i = {}, 0
        for name, a in self._blocks.items():
            out[name] = vec[i : i + a.size].reshape(a.shape)
            i += a.size
        return ModelParams(out)

    def replace(self, **blocks):
        new = dict(self._blocks)
        for k, v in blocks.items():
            if k not in new:
                raise KeyError(k)
            if np.shape(v) != new[k].shape:
                raise ValueError(f"block {k}: shape {np.shape(v)} != {new[k].shape}")
            new[k] = v
        return ModelParams(new)

    def equals(self, other):
        return self.names == other.names and all(
            np.array_equal(self[k], other[k]) for k in self.names
        )


# ---------------------------------------------------------------------------
# prior


def prior_sample(d, rng, n=None):
    """Draw from N(0, I_d); ``n`` rows if given."""
    if d < 1:
        raise ValueError("latent dimensionality must be >= 1")
    shape = (d,) if n is None else (n, d)
    return rng.standard_normal(shape)


def log_prior(z):
    """log N(z; 0, I), over the last axis."""
    z = np.asarray(z, dtype=np.float64)
    d = z.shape[-1]
    return -0.5 * d * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)


def _log_prior_graph(z):
    d = z.shape[-1]
    return ad.add(-0.5 * d * LOG_2PI, ad.mul(-0.5, ad.sum_(ad.mul(z, z), axis=1)))


# ---------------------------------------------------------------------------
# linear-Gaussian decoder and its closed forms


@dataclass(frozen=True)
class LinearGaussianSpec:
    """x | z ~ N(W z, sigma2 I) with W of shape (p, d)."""

    W: np.ndarray
    sigma2: float

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=np.float64))
        object.__setattr__(self, "W", W)
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if not np.all(np.isfinite(W)):
            raise ValueError("W must be finite")

    @property
    def p(self):
        return self.W.shape[0]

    @property
    def d(self):
        return self.W.shape[1]

    def params(self):
        return ModelParams({"W_t": self.W.T, "log_sigma2": np.array(math.log(self.sigma2))})

    @classmethod
    def from_params(cls, params):
        return cls(np.asarray(params["W_t"]).T, float(np.exp(params["log_sigma2"])))

    def sample(self, n, rng):
        """Draw ``n`` (x, z) pairs from the joint."""
        z = rng.standard_normal((n, self.d))
        x = z @ self.W.T + math.sqrt(self.sigma2) * rng.standard_normal((n, self.p))
        return x, z


def oracle_posterior(spec, x):
    """Mean and covariance of p(z | x); ``x`` may hold several rows."""
    W, s2 = spec.W, spec.sigma2
    prec = np.eye(spec.d) + W.T @ W / s2
    cov = np.linalg.inv(prec)
    assert np.all(np.isfinite(cov))
    mean = np.asarray(x, dtype=np.float64) @ W @ cov.T / s2
    return mean, cov


def oracle_log_marginal(spec, x):
    """log N(x; 0, W W^T + sigma2 I), over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    S = spec.W @ spec.W.T + spec.sigma2 * np.eye(spec.p)
    L = np.linalg.cholesky(S)
    sol = np.linalg.solve(L, np.atleast_2d(x).T).T
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    out = -0.5 * (spec.p * LOG_2PI + logdet) - 0.5 * np.sum(sol * sol, axis=-1)
    return out if x.ndim > 1 else float(out[0])


def gaussian_logpdf(z, mean, cov):
    z = np.atleast_2d(z)
    L = np.linalg.cholesky(cov)
    sol = np.linalg.solve(L, (z - mean).T).T
    d = cov.shape[0]
    return -0.5 * (d * LOG_2PI + 2.0 * np.sum(np.log(np.diag(L)))) - 0.5 * np.sum(sol * sol, axis=-1)


class LinearGaussianDecoder:
    kind = "linear_gaussian"

    def __init__(self, p, d):
        self.p = int(p)
        self.d = int(d)

    def config(self):
        return {"kind": self.kind, "p": self.p, "d": self.d}

    def init_params(self, rng, scale=0.5, sigma2=1.0):
        W = scale * rng.standard_normal((self.p, self.d))
        return LinearGaussianSpec(W, sigma2).params()

    def prepare(self, examples):
        x = np.atleast_2d(np.asarray(examples, dtype=np.float64))
        if x.shape[1] != self.p:
            raise ValueError(f"expected {self.p}-dimensional observations, got {x.shape[1]}")
        return x

    def n_tokens(self, example):
        return self.p

    def log_likelihood(self, pv, batch, z):
        if z.shape[-1] != self.d:
            raise ValueError(f"latent has {z.shape[-1]} dims, decoder expects {self.d}")
        r = ad.sub(batch, ad.matmul(z, pv["W_t"]))
        ls2 = pv["log_sigma2"]
        quad = ad.sum_(ad.mul(r, r), axis=1)
        return ad.sub(
            ad.add(-0.5 * self.p * LOG_2PI, ad.mul(-0.5 * self.p, ls2)),
            ad.mul(ad.mul(0.5, ad.exp(ad.neg(ls2))), quad),
        )


# ---------------------------------------------------------------------------
# recurrent token decoder


@dataclass
class TokenBatch:
    inputs: np.ndarray  # (m, T) previous token ids, eos as start symbol
    targets: np.ndarray  # (m, T)
    mask: np.ndarray  # (m, T) 1.0 on real positions
    lengths: np.ndarray  # (m,)


class LSTMDecoder:
    """One-layer LSTM over tokens, conditioned on z twice.

    z -> (h0, c0) through two affine maps, and [embedding(x_{t-1}), z] is the
    cell input at every step.  ``latent=False`` zeroes z inside the decoder,
    which is the ablation with no latent pathway.
    """

    kind = "lstm"

    def __init__(self, vocab_size, d, hidden=128, embed=64, eos_id=None, latent=True):
        self.V = int(vocab_size)
        self.d = int(d)
        self.H = int(hidden)
        self.E = int(embed)
        self.eos_id = self.V - 2 if eos_id is None else int(eos_id)
        self.latent = bool(latent)

    def config(self):
        return {
            "kind": self.kind,
            "vocab_size": self.V,
            "d": self.d,
            "hidden": self.H,
            "embed": self.E,
            "eos_id": self.eos_id,
            "latent": self.latent,
        }

    def init_params(self, rng, scale=0.08, latent_scale=None):
        """Uniform(-scale, scale) weights and zero biases.

        ``latent_scale`` optionally overrides the range for the weights that
        read z (the initial-state maps and the latent rows of ``W_in``).
        """
        V, d, H, E = self.V, self.d, self.H, self.E
        ls = scale if latent_scale is None else latent_scale

        def u(*shape, a=scale):
            return rng.uniform(-a, a, size=shape)

        W_in = u(E + d, 4 * H)
        W_in[E:] *= ls / scale if scale else 0.0
        return ModelParams(
            {
                "embed": u(V, E),
                "W_in": W_in,
                "W_h": u(H, 4 * H),
                "b": np.zeros(4 * H),
                "W_out": u(H, V),
                "b_out": np.zeros(V),
                "W_zh": u(d, H, a=ls),
                "b_zh": np.zeros(H),
                "W_zc": u(d, H, a=ls),
                "b_zc": np.zeros(H),
            }
        )

    def prepare(self, examples):
        m = len(examples)
        T = max(len(x) for x in examples)
        inputs = np.full((m, T), self.eos_id, dtype=np.int64)
        targets = np.full((m, T), self.eos_id, dtype=np.int64)
        mask = np.zeros((m, T))
        for i, x in enumerate(examples):
            x = np.asarray(x, dtype=np.int64)
            if len(x) == 0:
                raise ValueError("empty sentence")
            if x.min() < 0 or x.max() >= self.V:
                raise IndexError("token id out of range")
            targets[i, : len(x)] = x
            inputs[i, 1 : len(x)] = x[:-1]
            mask[i, : len(x)] = 1.0
        return TokenBatch(inputs, targets, mask, np.array([len(x) for x in examples]))

    def n_tokens(self, example):
        return len(example)

    def _z(self, z):
        return ad.mul(z, 0.0) if not self.latent else z

    def log_likelihood(self, pv, batch, z):
        if z.shape[-1] != self.d:
            raise ValueError(f"latent has {z.shape[-1]} dims, decoder expects {self.d}")
        H, E = self.H, self.E
        z = self._z(z)
        h = ad.add(ad.matmul(z, pv["W_zh"]), pv["b_zh"])
        c = ad.add(ad.matmul(z, pv["W_zc"]), pv["b_zc"])
        W_in = pv["W_in"]
        # [e, z] @ W_in split into the embedding and latent row blocks
        zg = ad.add(ad.matmul(z, ad.slice_(W_in, slice(E, None))), pv["b"])
        emb_g = ad.matmul(pv["embed"], ad.slice_(W_in, slice(0, E)))
        ll = None
        for t in range(batch.inputs.shape[1]):
            gates = ad.add(
                ad.add(ad.slice_(emb_g, batch.inputs[:, t]), zg), ad.matmul(h, pv["W_h"])
            )
            sg = ad.sigmoid(ad.slice_(gates, (slice(None), slice(0, 3 * H))))
            i = ad.slice_(sg, (slice(None), slice(0, H)))
            f = ad.slice_(sg, (slice(None), slice(H, 2 * H)))
            o = ad.slice_(sg, (slice(None), slice(2 * H, 3 * H)))
            g = ad.tanh(ad.slice_(gates, (slice(None), slice(3 * H, 4 * H))))
            c = ad.add(ad.mul(f, c), ad.mul(i, g))
            h = ad.mul(o, ad.tanh(c))
            logits = ad.add(ad.matmul(h, pv["W_out"]), pv["b_out"])
            nll = ad.softmax_cross_entropy(logits, batch.targets[:, t])
            step = ad.mul(nll, -batch.mask[:, t])
            ll = step if ll is None else ad.add(ll, step)
        return ll

    # plain numpy path used for decoding

    def _step(self, params, tok, h, c, zg):
        H = self.H
        E = self.E
        gates = params["embed"][tok] @ params["W_in"][:E] + zg + h @ params["W_h"]
        sg = xp.sigmoid(gates[:, : 3 * H])
        i, f, o = sg[:, :H], sg[:, H : 2 * H], sg[:, 2 * H :]
        g = np.tanh(gates[:, 3 * H :])
        c = f * c + i * g
        h = o * np.tanh(c)
        return h @ params["W_out"] + params["b_out"], h, c

    def greedy(self, params, z, max_len):
        """Greedy decode each row of ``z``; returns (token lists, truncated flags)."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        if not self.latent:
            z = z * 0.0
        m = z.shape[0]
        h = z @ params["W_zh"] + params["b_zh"]
        c = z @ params["W_zc"] + params["b_zc"]
        zg = z @ params["W_in"][self.E :] + params["b"]
        tok = np.full(m, self.eos_id, dtype=np.int64)
        out = [[] for _ in range(m)]
        done = np.zeros(m, dtype=bool)
        for _ in range(max_len):
            logits, h, c = self._step(params, tok, h, c, zg)
            tok = np.argmax(logits, axis=1)
            for r in np.flatnonzero(~done):
                out[r].append(int(tok[r]))
                if tok[r] == self.eos_id:
                    done[r] = True
            if done.all():
                break
        return out, [not x for x in done]


def decoder_from_config(cfg):
    cfg = dict(cfg)
    kind = cfg.pop("kind")
    if kind == LinearGaussianDecoder.kind:
        return LinearGaussianDecoder(cfg["p"], cfg["d"])
    if kind == LSTMDecoder.kind:
        return LSTMDecoder(
            cfg["vocab_size"],
            cfg["d"],
            hidden=cfg["hidden"],
            embed=cfg["embed"],
            eos_id=cfg["eos_id"],
            latent=cfg.get("latent", True),
        )
    raise ValueError(f"unknown decoder kind {kind!r}")


# ---------------------------------------------------------------------------
# model = decoder + parameter snapshot


@dataclass(frozen=True)
class Model:
    decoder: object
    params: ModelParams

    @property
    def d(self):
        return self.decoder.d

    def with_params(self, params):
        return Model(self.decoder, params)


def _const_params(params):
    return {k: ad.Value(v) for k, v in params.items()}


def log_likelihood(model, examples, z):
    """log p(x | z) per row; ``examples`` is a list or a prepared batch."""
    dec = model.decoder
    batch = examples if isinstance(examples, (np.ndarray, TokenBatch)) else dec.prepare(examples)
    if isinstance(batch, np.ndarray):
        batch = dec.prepare(batch)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return dec.log_likelihood(_const_params(model.params), batch, ad.Value(z)).numpy


def log_joint(model, examples, z):
    return log_prior(np.atleast_2d(z)) + log_likelihood(model, examples, z)


def log_joint_graph(decoder, pv, batch, z):
    return ad.add(_log_prior_graph(z), decoder.log_likelihood(pv, batch, z))


def grad_z_log_joint(model, batch, z):
    """Per-row log p(x, z) and its gradient in z.

    Rows are independent, so the gradient of the summed joint w.r.t. the
    (m, d) latent matrix is the stack of per-example gradients.  ``z`` may be
    a Dual, in which case both outputs carry tangents.
    """
    pv = _const_params(model.params)
    rows = []

    def f(zv):
        lj = log_joint_graph(model.decoder, pv, batch, zv)
        rows.append(lj)
        return ad.sum_(lj)

    _, (g,) = ad.value_and_grad(f, [z])
    return rows[0].data, g


def grad_params_log_joint(model, batch, z, trainable=None, weights=None):
    """Gradient of sum_i w_i log p(x_i, z_i) w.r.t. the trainable blocks.

    Returns (per-row log joint, {block: gradient}).
    """
    names = model.params.names if trainable is None else list(trainable)
    fixed = {k: ad.Value(v) for k, v in model.params.items() if k not in names}
    z = np.asarray(z, dtype=np.float64)
    rows = []

    def f(*blocks):
        pv = dict(fixed)
        pv.update(zip(names, blocks))
        lj = log_joint_graph(model.decoder, pv, batch, ad.Value(z))
        rows.append(lj)
        obj = lj if weights is None else ad.mul(lj, weights)
        return ad.sum_(obj)

    _, grads = ad.value_and_grad(f, [model.params[k] for k in names])
    return rows[0].numpy, dict(zip(names, grads))
