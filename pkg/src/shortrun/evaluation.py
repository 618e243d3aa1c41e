"""Metrics: importance-sampled log-likelihood and perplexity, reconstruction, active units, KL.

All estimators draw their chains through ``chain_inputs`` keyed by example
index, so results are independent of chunking and thread count.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import log_likelihood, log_prior
from .sri import chain_inputs, repeat_examples, short_run_infer, tracked_chains

PPL_STREAM = 101
POSTERIOR_STREAM = 102
KL_STREAM = 104

KL_INTERPRETATION = (
    "KL = E_x E_q[log q(z|x) - log p(z)], with log q the density of zK "
    "conditional on the realized Langevin noise path"
)


@dataclass(frozen=True)
class EvalConfig:
    M: int = 512
    samples: int = 200
    au_threshold: float = 1e-2
    chunk_chains: int = 1024
    threads: int = 1


def log_mean_exp(a, axis=-1):
    a = np.asarray(a, dtype=np.float64)
    mx = np.max(a, axis=axis, keepdims=True)
    out = mx + np.log(np.mean(np.exp(a - mx), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def importance_log_marginal(log_joint, log_q):
    """log (1/M) sum_i exp(log p(x, z_i) - log q(z_i)), max-shifted."""
    w = np.asarray(log_joint) - np.asarray(log_q)
    return float(log_mean_exp(w))


def _chunks(n, per_example, chunk_chains):
    step = max(1, chunk_chains // max(1, per_example))
    return [np.arange(lo, min(n, lo + step)) for lo in range(0, n, step)]


def _map(fn, parts, threads):
    if threads <= 1 or len(parts) <= 1:
        return [fn(p) for p in parts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, parts))


def _take(examples, idx):
    if isinstance(examples, np.ndarray):
        return examples[idx]
    return [examples[i] for i in idx]


# ---------------------------------------------------------------------------
# marginal likelihood


def log_marginals(model, examples, M, cfg, seed, ecfg=None, example_ids=None):
    """Importance-sampled log p(x) for every example (one value per example)."""
    if M < 1:
        raise ValueError("M must be >= 1")
    ecfg = ecfg or EvalConfig()
    n = len(examples)
    ids_all = np.arange(n) if example_ids is None else np.asarray(example_ids)

    def run(idx):
        rec, lj = tracked_chains(model, _take(examples, idx), M, cfg, seed, PPL_STREAM, ids_all[idx])
        w = (lj - rec.log_q).reshape(len(idx), M)
        ok = (~rec.divergent).reshape(len(idx), M)
        out = np.empty(len(idx))
        for r in range(len(idx)):
            if not ok[r].any():
                raise RuntimeError(f"all {M} chains diverged for example {ids_all[idx[r]]}")
            out[r] = log_mean_exp(w[r][ok[r]])
        return out

    return np.concatenate(_map(run, _chunks(n, M, ecfg.chunk_chains), ecfg.threads))


def estimate_log_marginal(model, x, M, cfg, seed, example_id=0):
    ex = np.atleast_2d(x) if isinstance(x, np.ndarray) else [x]
    return float(log_marginals(model, ex, M, cfg, seed, example_ids=[example_id])[0])


def perplexity(model, examples, M, cfg, seed, ecfg=None):
    """exp(-sum log p(x) / total tokens); end-of-sentence tokens count."""
    if len(examples) == 0:
        raise ValueError("empty corpus")
    lm = log_marginals(model, examples, M, cfg, seed, ecfg)
    tokens = sum(model.decoder.n_tokens(x) for x in examples)
    return math.exp(-float(np.sum(lm)) / tokens)


# ---------------------------------------------------------------------------
# posterior-sample metrics


def posterior_samples(model, examples, samples, cfg, seed, ecfg=None, example_ids=None,
                      infer_from=None):
    """Untracked short-run samples, shape (n, samples, d), plus divergence mask.

    ``infer_from`` optionally supplies the examples the chains condition on
    (e.g. noised copies) while keeping the same chain inputs.
    """
    ecfg = ecfg or EvalConfig()
    n = len(examples)
    ids_all = np.arange(n) if example_ids is None else np.asarray(example_ids)
    source = examples if infer_from is None else infer_from
    run_cfg = cfg.with_(track_jacobian=False)

    def run(idx):
        z0, noise = chain_inputs(seed, len(idx), samples, cfg.K, model.d, POSTERIOR_STREAM, ids_all[idx])
        rec = short_run_infer(model, repeat_examples(_take(source, idx), samples), run_cfg,
                              z0=z0, noise=noise)
        return rec.zK, rec.divergent

    parts = _map(run, _chunks(n, samples, ecfg.chunk_chains), ecfg.threads)
    z = np.concatenate([p[0] for p in parts]).reshape(n, samples, model.d)
    div = np.concatenate([p[1] for p in parts]).reshape(n, samples)
    return z, div


def _recon_from_samples(model, examples, z, div, chunk_chains=1024):
    """Per-example mean of -log p(x | z) over the non-divergent samples."""
    n, S, _ = z.shape
    zs = np.where(div[..., None], 0.0, z)
    parts = []
    for idx in _chunks(n, S, chunk_chains):
        rep = repeat_examples(_take(examples, idx), S)
        parts.append(-log_likelihood(model, rep, zs[idx].reshape(len(idx) * S, -1)))
    nll = np.concatenate(parts).reshape(n, S)
    return np.array([nll[i][~div[i]].mean() if (~div[i]).any() else np.nan for i in range(n)])


def reconstruction_error(model, examples, samples, cfg, seed, ecfg=None, return_se=False):
    """Average over examples of E_q[-log p(x | z)]."""
    z, div = posterior_samples(model, examples, samples, cfg, seed, ecfg)
    per = _recon_from_samples(model, examples, z, div)
    val = float(np.nanmean(per))
    if return_se:
        return val, float(np.nanstd(per, ddof=1) / math.sqrt(len(per))) if len(per) > 1 else 0.0
    return val


def posterior_means(model, examples, samples, cfg, seed, ecfg=None, example_ids=None):
    z, div = posterior_samples(model, examples, samples, cfg, seed, ecfg, example_ids)
    w = (~div)[..., None].astype(float)
    return np.sum(z * w, axis=1) / np.maximum(w.sum(axis=1), 1.0)


def active_units(model, examples, samples, cfg, seed, threshold=1e-2, ecfg=None, means=None):
    """Count latent dims whose posterior mean varies across examples by more than ``threshold``."""
    if len(examples) < 2:
        raise ValueError("active units need at least two examples")
    if means is None:
        means = posterior_means(model, examples, samples, cfg, seed, ecfg)
    return int(np.sum(np.var(means, axis=0) > threshold))


def kl_estimate(model, examples, samples, cfg, seed, ecfg=None, return_se=False):
    """Average over examples of E_q[log q(z | x) - log p(z)]."""
    ecfg = ecfg or EvalConfig()
    n = len(examples)

    def run(idx):
        rec, _ = tracked_chains(model, _take(examples, idx), samples, cfg, seed, KL_STREAM, idx)
        v = (rec.log_q - log_prior(rec.zK)).reshape(len(idx), samples)
        ok = (~rec.divergent).reshape(len(idx), samples)
        return np.array([v[r][ok[r]].mean() if ok[r].any() else np.nan for r in range(len(idx))])

    per = np.concatenate(_map(run, _chunks(n, samples, ecfg.chunk_chains), ecfg.threads))
    val = float(np.nanmean(per))
    if return_se:
        return val, float(np.nanstd(per, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return val


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricsReport:
    ppl: float
    recon: float
    au: int
    kl: float
    log_marginal_per_token: float
    M: int
    seed: int
    config_hash: str
    kl_se: float = float("nan")
    recon_se: float = float("nan")
    n_examples: int = 0
    notes: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def write(self, path, history=None):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")
        if history is not None:
            with open(history, "a", encoding="utf-8") as f:
                f.write(self.to_json() + "\n")


def config_hash(obj):
    """Short stable hash of a JSON-serializable config echo."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def evaluate(model, examples, cfg, ecfg, seed, chash=None):
    """Full metric suite on ``examples``."""
    lm = log_marginals(model, examples, ecfg.M, cfg, seed, ecfg)
    tokens = sum(model.decoder.n_tokens(x) for x in examples)
    lpt = float(np.sum(lm)) / tokens
    z, div = posterior_samples(model, examples, ecfg.samples, cfg, seed, ecfg)
    per = _recon_from_samples(model, examples, z, div)
    w = (~div)[..., None].astype(float)
    means = np.sum(z * w, axis=1) / np.maximum(w.sum(axis=1), 1.0)
    au = int(np.sum(np.var(means, axis=0) > ecfg.au_threshold)) if len(examples) > 1 else 0
    kl, kl_se = kl_estimate(model, examples, ecfg.samples, cfg, seed, ecfg, return_se=True)
    n = len(examples)
    return MetricsReport(
        ppl=math.exp(-lpt),
        recon=float(np.nanmean(per)),
        au=au,
        kl=kl,
        log_marginal_per_token=lpt,
        M=ecfg.M,
        seed=int(seed),
        config_hash=chash or "",
        kl_se=kl_se,
        recon_se=float(np.nanstd(per, ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        n_examples=n,
        notes={"kl": KL_INTERPRETATION, "au_threshold": ecfg.au_threshold,
               "samples": ecfg.samples, "K": cfg.K, "step_size": cfg.s},
    )
