"""Short-run Langevin inference.

Each chain starts at a prior draw and takes K Langevin steps on
log p(x, z).  With the noise path held fixed, z0 -> zK is a deterministic,
differentiable map, so its Jacobian (accumulated by pushing d forward-mode
directions through every step) gives the conditional density of zK by change
of variables.  That density drives the importance-sampled marginal
likelihood, the entropy term of the step-size objective and the KL metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import dual as xp
from .dual import Dual
from .model import grad_z_log_joint, log_joint, log_prior

DEFAULT_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)

# |det| below this means the dynamics collapsed volume to nothing
MIN_LOG_ABS_DET = math.log(1e-300)


@dataclass(frozen=True)
class SriConfig:
    K: int = 20
    s: float = 0.1
    noise: bool = True
    track_jacobian: bool = False
    divergence_threshold: float = 1e3

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if not self.s > 0:
            raise ValueError("step size must be positive")

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass(frozen=True)
class StepSizeGrid:
    values: tuple = DEFAULT_GRID
    samples: int = 4

    def __post_init__(self):
        v = tuple(float(x) for x in self.values)
        object.__setattr__(self, "values", v)
        if not v:
            raise ValueError("step-size grid is empty")
        if any(x <= 0 for x in v) or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("step-size grid must be positive and strictly increasing")
        if self.samples < 1:
            raise ValueError("samples per example must be >= 1")


@dataclass
class ChainRecord:
    """A batch of short-run trajectories, one row per chain.

    ``jacobian[i]`` is d zK / d z0 for chain i (output dims by input dims) and
    ``log_q`` the conditional log density of ``zK[i]``; both are None unless
    tracking was on.  Divergent chains were frozen once ``|z|`` crossed the
    guard and should be excluded downstream.
    """

    z0: np.ndarray
    noise: np.ndarray
    zK: np.ndarray
    divergent: np.ndarray
    jacobian: np.ndarray | None = None
    log_q: np.ndarray | None = None

    def __len__(self):
        return self.z0.shape[0]

    @property
    def n_divergent(self):
        return int(self.divergent.sum())


def chain_inputs(seed, n_examples, samples, K, d, stream=0, example_ids=None):
    """Initial states and noise for ``n_examples * samples`` chains.

    Every example draws from its own generator keyed by (seed, stream,
    example id), and sample j always takes the same slice of that stream, so
    results do not depend on batching or on how many examples share a call.
    Rows are example-major.
    """
    ids = range(n_examples) if example_ids is None else example_ids
    n = len(ids)
    z0 = np.empty((n * samples, d))
    noise = np.empty((K, n * samples, d))
    for r, i in enumerate(ids):
        g = np.random.default_rng([int(seed), int(stream), int(i)])
        block = g.standard_normal((samples, K + 1, d))
        z0[r * samples : (r + 1) * samples] = block[:, 0]
        noise[:, r * samples : (r + 1) * samples] = block[:, 1:].transpose(1, 0, 2)
    return z0, noise


def repeat_examples(examples, samples):
    if isinstance(examples, np.ndarray):
        return np.repeat(np.atleast_2d(examples), samples, axis=0)
    return [x for x in examples for _ in range(samples)]


def _prepare(model, x):
    dec = model.decoder
    if isinstance(x, np.ndarray) or isinstance(x, list):
        return dec.prepare(x)
    return x


def langevin_step(model, x, z, s, eps):
    """z + s * grad_z log p(x, z) + sqrt(2 s) * eps, row-wise.

    ``z`` may be a Dual, which carries the step's Jacobian-vector products.
    """
    if not s > 0:
        raise ValueError("step size must be positive")
    batch = _prepare(model, x)
    _, g = grad_z_log_joint(model, batch, z)
    if not xp.isfinite_all(g):
        raise FloatingPointError("non-finite latent gradient")
    return xp.add(xp.add(z, xp.multiply(s, g)), math.sqrt(2.0 * s) * np.asarray(eps))


def langevin_step_jacobian(model, x, z, s):
    """Per-row d z_{k+1} / d z_k, shape (m, d, d); independent of the noise."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    m, d = z.shape
    dirs = np.broadcast_to(np.eye(d)[:, None, :], (d, m, d)).copy()
    out = langevin_step(model, x, Dual(z, dirs), s, np.zeros_like(z))
    return np.transpose(out.tangent, (1, 2, 0))


def short_run_infer(model, x, cfg, rng=None, *, z0=None, noise=None):
    """Run K Langevin steps from the prior for every row of ``x``.

    Either pass a numpy Generator as ``rng`` or supply ``z0`` (m, d) and
    ``noise`` (K, m, d) explicitly.
    """
    batch = _prepare(model, x)
    m = batch.shape[0] if isinstance(batch, np.ndarray) else batch.inputs.shape[0]
    d, K, s = model.d, cfg.K, cfg.s
    if z0 is None:
        if rng is None:
            raise ValueError("need rng or explicit z0/noise")
        z0 = rng.standard_normal((m, d))
        noise = rng.standard_normal((K, m, d))
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if z0.shape != (m, d) or noise.shape != (K, m, d):
        raise ValueError(f"chain inputs have shapes {z0.shape}, {noise.shape}")
    if not cfg.noise:
        noise = np.zeros_like(noise)

    z = Dual(z0, np.broadcast_to(np.eye(d)[:, None, :], (d, m, d)).copy()) if cfg.track_jacobian else z0
    divergent = np.zeros(m, dtype=bool)
    root2s = math.sqrt(2.0 * s)
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            _, g = grad_z_log_joint(model, batch, z)
            gp = xp.primal(g)
            bad = ~np.all(np.isfinite(gp), axis=1)
            if np.any(bad & ~divergent):
                raise FloatingPointError(f"non-finite latent gradient at step {k}")
            if np.any(bad):
                g = xp.where(bad[:, None], 0.0, g)
            step = xp.add(xp.add(z, xp.multiply(s, g)), root2s * noise[k])
            z = xp.where(divergent[:, None], z, step)
            divergent |= np.linalg.norm(xp.primal(z), axis=1) > cfg.divergence_threshold

    zK = np.array(xp.primal(z))
    rec = ChainRecord(z0=z0, noise=noise, zK=zK, divergent=divergent)
    if cfg.track_jacobian:
        rec.jacobian = np.transpose(z.tangent, (1, 2, 0)).copy()
        rec.log_q = log_q_density(rec)
    return rec


def log_q_density(record):
    """log q(zK) = log p(z0) - log|det d zK / d z0| per chain.

    Divergent chains get NaN.
    """
    if record.jacobian is None:
        raise ValueError("chain record has no tracked Jacobian")
    ok = ~record.divergent
    sign, logabsdet = np.linalg.slogdet(record.jacobian)
    if np.any(ok & ((sign == 0) | (logabsdet < MIN_LOG_ABS_DET))):
        raise FloatingPointError("singular Jacobian of the short-run map")
    out = log_prior(record.z0) - logabsdet
    return np.where(ok, out, np.nan)


def tracked_chains(model, examples, samples, cfg, seed, stream=0, example_ids=None):
    """Tracked chains for every example, plus log p(x, zK) for each row."""
    n = len(examples)
    rep = repeat_examples(examples, samples)
    z0, noise = chain_inputs(seed, n, samples, cfg.K, model.d, stream, example_ids)
    rec = short_run_infer(model, rep, cfg.with_(track_jacobian=True), z0=z0, noise=noise)
    with np.errstate(over="ignore", invalid="ignore"):
        lj = log_joint(model, rep, rec.zK)
    return rec, lj


def tilde_Q(model, examples, s, samples, cfg, seed, stream=0, return_se=False):
    """Monte Carlo estimate of E_q[log p(x, z)] - E_q[log q(z | x)].

    This is the log-likelihood minus KL(q || posterior), averaged over the
    examples.  Any divergent or non-finite chain makes the candidate
    unusable and the score is -inf.
    """
    if len(examples) == 0:
        raise ValueError("empty batch")
    try:
        rec, lj = tracked_chains(model, examples, samples, cfg.with_(s=s), seed, stream)
    except FloatingPointError:
        return (-np.inf, np.inf) if return_se else -np.inf
    vals = lj - rec.log_q
    if rec.n_divergent or not np.all(np.isfinite(vals)):
        return (-np.inf, np.inf) if return_se else -np.inf
    est = float(np.mean(vals))
    if return_se:
        return est, float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
    return est


def score_step_sizes(model, examples, grid, cfg, seed, stream=0):
    """tilde_Q for every grid value, all candidates sharing the same chain inputs."""
    return {
        s: tilde_Q(model, examples, s, grid.samples, cfg, seed, stream) for s in grid.values
    }


def optimize_step_size(model, examples, grid, cfg, seed, stream=0):
    """Grid value maximizing tilde_Q; ties go to the smaller step size."""
    scores = score_step_sizes(model, examples, grid, cfg, seed, stream)
    best, best_score = None, -np.inf
    for s in grid.values:
        q = scores[s]
        if np.isfinite(q) and (best is None or q > best_score):
            best, best_score = s, q
    if best is None:
        raise RuntimeError("every step-size candidate produced a non-finite objective")
    return best
