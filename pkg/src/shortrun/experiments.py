"""Self-contained experiments with analytic or synthetic ground truth.

Each ``run_*`` function returns a flat, JSON-serializable dict of results
together with the thresholds it is judged against, so the same routine backs
the acceptance tests, the scripts in ``scripts/`` and reproducibility checks.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import evaluation as ev
from . import probes
from .data import Vocab, is_toy_grammar, tokenize, toy_grammar_lines
from .model import (
    LinearGaussianDecoder,
    LinearGaussianSpec,
    LSTMDecoder,
    Model,
    oracle_log_marginal,
    oracle_posterior,
)
from .sri import (
    DEFAULT_GRID,
    SriConfig,
    StepSizeGrid,
    chain_inputs,
    langevin_step,
    optimize_step_size,
    repeat_examples,
    score_step_sizes,
    short_run_infer,
)
from .training import TrainConfig, fixed_point_residual, train


def linear_gaussian_model(spec):
    return Model(LinearGaussianDecoder(spec.p, spec.d), spec.params())


def gaussian_kl(m1, S1, m0, S0):
    """KL(N(m1, S1) || N(m0, S0))."""
    d = len(m0)
    S0inv = np.linalg.inv(S0)
    diff = m0 - m1
    _, ld0 = np.linalg.slogdet(S0)
    _, ld1 = np.linalg.slogdet(S1)
    return 0.5 * (np.trace(S0inv @ S1) + diff @ S0inv @ diff - d + ld0 - ld1)


def chain_path(model, x, cfg, z0, noise):
    """All iterates z_0..z_K of the untracked dynamics, shape (K+1, m, d)."""
    batch = model.decoder.prepare(x)
    z = z0
    path = [z0]
    for k in range(cfg.K):
        z = langevin_step(model, batch, z, cfg.s, noise[k] if cfg.noise else np.zeros_like(z))
        path.append(z)
    return np.array(path)


# ---------------------------------------------------------------------------
# 1. posterior sampling


@dataclass(frozen=True)
class PosteriorSamplingConfig:
    d: int = 2
    p: int = 3
    sigma2: float = 1.0
    chains: int = 10_000
    K: int = 20
    grid: tuple = DEFAULT_GRID
    grid_samples: int = 256
    rel_tol: float = 0.05
    uptick: float = 0.05
    seed: int = 11


def run_posterior_sampling(cfg=PosteriorSamplingConfig()):
    rng = np.random.default_rng(cfg.seed)
    spec = LinearGaussianSpec(rng.standard_normal((cfg.p, cfg.d)), cfg.sigma2)
    x, _ = spec.sample(1, rng)
    model = linear_gaussian_model(spec)
    sri = SriConfig(K=cfg.K)
    s = optimize_step_size(model, x, StepSizeGrid(cfg.grid, cfg.grid_samples), sri, cfg.seed)
    z0, noise = chain_inputs(cfg.seed, 1, cfg.chains, cfg.K, cfg.d, stream=1)
    path = chain_path(model, repeat_examples(x, cfg.chains), sri.with_(s=s), z0, noise)
    mean, cov = oracle_posterior(spec, x)
    mean = mean[0]
    emp_mean = path[-1].mean(axis=0)
    emp_cov = np.cov(path[-1].T)
    rel_mean = np.abs(emp_mean - mean) / np.abs(mean)
    rel_cov = np.abs(emp_cov - cov) / np.abs(cov)
    kls = [float(gaussian_kl(z.mean(0), np.cov(z.T), mean, cov)) for z in path]
    worst = max(kls[k + 1] / kls[k] for k in range(cfg.K))
    return {
        "step_size": s,
        "oracle_mean": mean.tolist(),
        "oracle_cov": cov.tolist(),
        "sample_mean": emp_mean.tolist(),
        "sample_cov": emp_cov.tolist(),
        "max_rel_err_mean": float(rel_mean.max()),
        "max_rel_err_cov": float(rel_cov.max()),
        "kl_path": kls,
        "max_kl_ratio": float(worst),
        "moments_pass": bool(max(rel_mean.max(), rel_cov.max()) < cfg.rel_tol),
        "kl_monotone_pass": bool(worst <= 1.0 + cfg.uptick),
    }


# ---------------------------------------------------------------------------
# 2. density tracker


@dataclass(frozen=True)
class DensityTrackerConfig:
    trials: int = 50
    d: int = 2
    K: int = 3
    s: float = 0.05
    h: float = 1e-5
    tol: float = 1e-4
    seed: int = 12


def _random_small_model(rng, d):
    dec = LSTMDecoder(vocab_size=5, d=d, hidden=4, embed=3, eos_id=3)
    params = dec.init_params(rng, scale=0.5)
    x = list(rng.integers(0, 3, size=int(rng.integers(1, 6)))) + [3]
    return Model(dec, params), [x]


def run_density_tracker(cfg=DensityTrackerConfig()):
    rng = np.random.default_rng(cfg.seed)
    sri = SriConfig(K=cfg.K, s=cfg.s)
    errs = []
    for trial in range(cfg.trials):
        model, x = _random_small_model(rng, cfg.d)
        batch = model.decoder.prepare(x)
        z0, noise = chain_inputs(cfg.seed, 1, 1, cfg.K, cfg.d, stream=trial)
        rec = short_run_infer(model, batch, sri.with_(track_jacobian=True), z0=z0, noise=noise)

        def fmap(z):
            return short_run_infer(model, batch, sri, z0=z[None], noise=noise).zK[0]

        J = np.empty((cfg.d, cfg.d))
        for j in range(cfg.d):
            e = np.zeros(cfg.d)
            e[j] = cfg.h
            J[:, j] = (fmap(z0[0] + e) - fmap(z0[0] - e)) / (2 * cfg.h)
        _, ld_fd = np.linalg.slogdet(J)
        _, ld = np.linalg.slogdet(rec.jacobian[0])
        errs.append(abs(float(ld - ld_fd)))
    return {
        "trials": cfg.trials,
        "max_abs_err": max(errs),
        "mean_abs_err": float(np.mean(errs)),
        "pass": bool(max(errs) < cfg.tol),
    }


# ---------------------------------------------------------------------------
# 3. marginal likelihood


@dataclass(frozen=True)
class MarginalConfig:
    d: int = 2
    p: int = 3
    sigma2: float = 1.0
    points: int = 100
    M: int = 512
    K: int = 20
    grid: tuple = DEFAULT_GRID
    grid_samples: int = 16
    tol: float = 0.05
    seed: int = 13


def run_marginal_likelihood(cfg=MarginalConfig()):
    rng = np.random.default_rng(cfg.seed)
    spec = LinearGaussianSpec(rng.standard_normal((cfg.p, cfg.d)), cfg.sigma2)
    x, _ = spec.sample(cfg.points, rng)
    model = linear_gaussian_model(spec)
    sri = SriConfig(K=cfg.K)
    s = optimize_step_size(model, x, StepSizeGrid(cfg.grid, cfg.grid_samples), sri, cfg.seed)
    est = ev.log_marginals(model, x, cfg.M, sri.with_(s=s), cfg.seed)
    exact = oracle_log_marginal(spec, x)
    err = est - exact
    return {
        "step_size": s,
        "mean_abs_err": float(np.mean(np.abs(err))),
        "mean_err": float(np.mean(err)),
        "max_abs_err": float(np.max(np.abs(err))),
        "pass": bool(np.mean(np.abs(err)) < cfg.tol),
    }


# ---------------------------------------------------------------------------
# 4. learning recovers the generating parameter


@dataclass(frozen=True)
class RecoveryConfig:
    n: int = 5000
    W_true: float = 2.0
    W_init: float = 0.5
    iterations: int = 2000
    batch_size: int = 100
    lr: float = 0.1
    lr_decay: float = 0.005
    K: int = 20
    s: float = 0.03
    residual_samples: int = 1
    tol: float = 0.1
    seed: int = 1


def run_recovery(cfg=RecoveryConfig()):
    rng = np.random.default_rng(cfg.seed)
    truth = LinearGaussianSpec(np.array([[cfg.W_true]]), 1.0)
    x, _ = truth.sample(cfg.n, rng)
    start = LinearGaussianSpec(np.array([[cfg.W_init]]), 1.0)
    model = linear_gaussian_model(start)
    sri = SriConfig(K=cfg.K, s=cfg.s)
    tcfg = TrainConfig(
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        lr_decay=cfg.lr_decay,
        step_interval=cfg.iterations + 1,
        trainable=("W_t",),
        seed=cfg.seed,
        sri=sri,
    )
    r0, se0 = fixed_point_residual(model, x, sri, cfg.residual_samples, cfg.seed, ("W_t",), return_se=True)
    state, rows = train(model, x, tcfg)
    fitted = model.with_params(state.params)
    W_hat = float(state.params["W_t"][0, 0])
    r, se = fixed_point_residual(fitted, x, sri, cfg.residual_samples, cfg.seed, ("W_t",), return_se=True)
    return {
        "W_hat": W_hat,
        "abs_err": abs(abs(W_hat) - cfg.W_true),
        "residual": r,
        "residual_se": se,
        "initial_residual": r0,
        "initial_residual_se": se0,
        "divergent_chains": state.divergent_total,
        "final_loss": rows[-1]["loss"],
        "recovery_pass": bool(abs(abs(W_hat) - cfg.W_true) < cfg.tol),
        "residual_pass": bool(r <= 3.0 * se),
    }


# ---------------------------------------------------------------------------
# 5. step-size selection


@dataclass(frozen=True)
class StepSizeConfig:
    W: float = 2.0
    sigma2: float = 1.0
    examples: int = 64
    K: int = 20
    grid: tuple = DEFAULT_GRID
    grid_samples: int = 16
    chains: int = 10_000
    burn_in: int = 3000
    tol: float = 0.10
    seed: int = 15


def stationary_variance(s, precision):
    """Stationary variance of z' = z - s*precision*(z - mu) + sqrt(2 s) eps."""
    a = 1.0 - s * precision
    if abs(a) >= 1.0:
        return math.inf
    return 2.0 * s / (1.0 - a * a)


def run_step_size(cfg=StepSizeConfig()):
    rng = np.random.default_rng(cfg.seed)
    spec = LinearGaussianSpec(np.array([[cfg.W]]), cfg.sigma2)
    x, _ = spec.sample(cfg.examples, rng)
    model = linear_gaussian_model(spec)
    sri = SriConfig(K=cfg.K)
    grid = StepSizeGrid(cfg.grid, cfg.grid_samples)
    s = optimize_step_size(model, x, grid, sri, cfg.seed)
    scores = score_step_sizes(model, x, grid, sri, cfg.seed)
    _, cov = oracle_posterior(spec, x[:1])
    v = float(cov[0, 0])
    v_closed = stationary_variance(s, 1.0 / v)
    # long chains at the selected s, all on one observation
    z0, noise = chain_inputs(cfg.seed, 1, cfg.chains, cfg.burn_in, 1, stream=5)
    zK = short_run_infer(model, repeat_examples(x[:1], cfg.chains), SriConfig(K=cfg.burn_in, s=s),
                         z0=z0, noise=noise).zK
    v_emp = float(np.var(zK))
    finite = {k: q for k, q in scores.items() if np.isfinite(q)}
    return {
        "selected": s,
        "scores": {repr(k): q for k, q in scores.items()},
        "posterior_variance": v,
        "stationary_variance": v_closed,
        "empirical_variance": v_emp,
        "rel_err": abs(v_closed - v) / v,
        "rel_err_empirical": abs(v_emp - v) / v,
        "variance_pass": bool(abs(v_closed - v) / v < cfg.tol and abs(v_emp - v) / v < cfg.tol),
        "argmax_pass": bool(scores[s] == max(finite.values())),
    }


# ---------------------------------------------------------------------------
# toy grammar language model (criteria 6 and 7)


@dataclass(frozen=True)
class ToyConfig:
    sentences: int = 2000
    d: int = 8
    hidden: int = 32
    embed: int = 16
    iterations: int = 1000
    batch_size: int = 64
    lr: float = 0.01
    optimizer: str = "adam"
    clip: float = 5.0
    K: int = 20
    s: float = 0.1
    eval_examples: int = 64
    eval_samples: int = 200
    kl_examples: int = 32
    kl_samples: int = 20
    au_threshold: float = 1e-2
    kl_min: float = 0.5
    seed: int = 16


def toy_corpus(n, seed):
    lines = toy_grammar_lines(n, np.random.default_rng([seed, 0]))
    toks = [tokenize(line, "char") for line in lines]
    vocab = Vocab.build(toks, "char")
    return [vocab.encode(t) for t in toks], vocab


def train_toy_model(cfg=ToyConfig(), latent=True, log=None):
    data, vocab = toy_corpus(cfg.sentences, cfg.seed)
    dec = LSTMDecoder(len(vocab), cfg.d, hidden=cfg.hidden, embed=cfg.embed,
                      eos_id=vocab.eos_id, latent=latent)
    model = Model(dec, dec.init_params(np.random.default_rng([cfg.seed, 1])))
    sri = SriConfig(K=cfg.K, s=cfg.s)
    tcfg = TrainConfig(
        iterations=cfg.iterations,
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        optimizer=cfg.optimizer,
        clip=cfg.clip,
        step_interval=cfg.iterations + 1,
        seed=cfg.seed,
        sri=sri,
    )
    state, rows = train(model, data, tcfg, callback=log)
    return model.with_params(state.params), data, vocab, rows


def toy_metrics(model, data, cfg):
    sri = SriConfig(K=cfg.K, s=cfg.s)
    held = data[: cfg.eval_examples]
    means = ev.posterior_means(model, held, cfg.eval_samples, sri, cfg.seed)
    var = np.var(means, axis=0)
    kl, kl_se = ev.kl_estimate(model, data[: cfg.kl_examples], cfg.kl_samples, sri, cfg.seed,
                               return_se=True)
    return {
        "au": int(np.sum(var > cfg.au_threshold)),
        "mean_variance": var.tolist(),
        "kl": kl,
        "kl_se": kl_se,
    }


def run_collapse(cfg=ToyConfig()):
    t0 = time.perf_counter()
    model, data, vocab, rows = train_toy_model(cfg, latent=True)
    full = toy_metrics(model, data, cfg)
    ablated_model, _, _, arows = train_toy_model(cfg, latent=False)
    ablated = toy_metrics(ablated_model, data, cfg)
    return {
        "latent": full,
        "ablated": ablated,
        "final_loss": rows[-1]["loss"],
        "ablated_final_loss": arows[-1]["loss"],
        "au_pass": bool(full["au"] >= 1),
        "kl_pass": bool(full["kl"] > cfg.kl_min),
        "ablated_pass": bool(ablated["au"] == 0),
        "seconds": time.perf_counter() - t0,
        "_model": model,
        "_vocab": vocab,
        "_data": data,
    }


# ---------------------------------------------------------------------------
# 7. probes


@dataclass(frozen=True)
class ProbeConfig:
    pairs: int = 20
    swap_cases: int = 100_000
    noisy_examples: int = 128
    noisy_samples: int = 50
    ks: tuple = (0, 1, 2, 3, 4)
    slack: float = 0.02
    gmm_points: int = 500
    gmm_separation: float = 5.0
    seed: int = 17


def run_probes(model, data, vocab, toy=ToyConfig(), cfg=ProbeConfig()):
    rng = np.random.default_rng(cfg.seed)
    # interpolation endpoints
    ok = True
    for _ in range(cfg.pairs):
        z1, z2 = rng.standard_normal((2, model.d))
        path = probes.interpolate(model, z1, z2)
        ok &= path.sentences[0].tokens == probes.greedy_decode(model, z1).tokens
        ok &= path.sentences[-1].tokens == probes.greedy_decode(model, z2).tokens
    samples = probes.sample_sentences(model, 100, np.random.default_rng([cfg.seed, 1]))
    valid = float(np.mean([is_toy_grammar(vocab.decode(s.tokens)) for s in samples]))
    # swap noise
    srng = np.random.default_rng([cfg.seed, 2])
    preserved = True
    for _ in range(cfg.swap_cases):
        n = int(srng.integers(2, 20))
        x = list(srng.integers(0, 6, size=n)) + [9]
        k = int(srng.integers(0, 6))
        y = probes.swap_noise(x, k, srng, eos=9)
        preserved &= sorted(y) == sorted(x) and y[-1] == 9
    # noisy reconstruction sweep
    sri = SriConfig(K=toy.K, s=toy.s)
    lines = toy_grammar_lines(cfg.noisy_examples, np.random.default_rng([cfg.seed, 4]))
    held = [vocab.encode(tokenize(line, "char")) for line in lines]
    sweep = probes.noisy_reconstruction_sweep(model, held, cfg.ks, cfg.noisy_samples, sri, cfg.seed,
                                              eos=vocab.eos_id)
    vals = [sweep[k] for k in cfg.ks]
    monotone = all(b >= a * (1.0 - cfg.slack) for a, b in zip(vals, vals[1:]))
    # Gaussian mixture on two separated clusters
    grng = np.random.default_rng([cfg.seed, 3])
    m = cfg.gmm_points
    X = np.concatenate([grng.standard_normal((m, 2)), grng.standard_normal((m, 2))])
    X[:m, 0] -= cfg.gmm_separation
    X[m:, 0] += cfg.gmm_separation
    labels = np.repeat([0, 1], m)
    fit = probes.gmm_cluster(probes.FeatureMatrix(X, labels), 2, grng)
    return {
        "endpoints_pass": bool(ok),
        "grammar_valid_fraction": valid,
        "swap_pass": bool(preserved),
        "noisy_recon": {str(k): v for k, v in sweep.items()},
        "noisy_monotone_pass": bool(monotone),
        "gmm_accuracy": fit.accuracy,
        "gmm_pass": bool(fit.accuracy >= 0.99),
    }


def public(result):
    """Drop non-serializable entries (keys starting with an underscore)."""
    return {k: v for k, v in result.items() if not k.startswith("_")}


@dataclass
class Suite:
    posterior: dict = field(default_factory=dict)
    density: dict = field(default_factory=dict)
    marginal: dict = field(default_factory=dict)
    recovery: dict = field(default_factory=dict)
    step_size: dict = field(default_factory=dict)
    collapse: dict = field(default_factory=dict)
    probes: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)


def run_suite(toy=ToyConfig(), timings=None):
    """Criteria 1-7 end to end; returns a Suite of JSON-serializable dicts.

    ``timings``, if given, receives the wall time of each part in seconds.
    """
    timings = {} if timings is None else timings

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        out = fn(*args)
        timings[name] = time.perf_counter() - t0
        return out

    collapse = timed("collapse", run_collapse, toy)
    probe = timed("probes", run_probes, collapse["_model"], collapse["_data"], collapse["_vocab"], toy)
    out = Suite(
        posterior=timed("posterior", run_posterior_sampling),
        density=timed("density", run_density_tracker),
        marginal=timed("marginal", run_marginal_likelihood),
        recovery=timed("recovery", run_recovery),
        step_size=timed("step_size", run_step_size),
        collapse=public(collapse),
        probes=probe,
    )
    out.collapse.pop("seconds", None)
    return out
