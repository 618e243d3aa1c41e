import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from shortrun.evaluation import (
    EvalConfig,
    MetricsReport,
    _recon_from_samples,
    active_units,
    config_hash,
    estimate_log_marginal,
    evaluate,
    importance_log_marginal,
    kl_estimate,
    log_marginals,
    log_mean_exp,
    perplexity,
    posterior_means,
    posterior_samples,
    reconstruction_error,
)
from shortrun.experiments import gaussian_kl
from shortrun.model import (
    LinearGaussianDecoder,
    LinearGaussianSpec,
    LSTMDecoder,
    Model,
    ModelParams,
    gaussian_logpdf,
    log_joint,
    oracle_log_marginal,
    oracle_posterior,
)
from shortrun.sri import SriConfig, StepSizeGrid, optimize_step_size
from shortrun.training import TrainConfig, train


def lg(W, sigma2=1.0):
    spec = LinearGaussianSpec(np.atleast_2d(np.asarray(W, float)), sigma2)
    return Model(LinearGaussianDecoder(spec.p, spec.d), spec.params()), spec


@pytest.fixture(scope="module")
def oracle_setup():
    rng = np.random.default_rng(77)
    model, spec = lg(rng.standard_normal((3, 2)))
    x, _ = spec.sample(20, rng)
    return model, spec, x


def uniform_lstm(V=7, d=3):
    dec = LSTMDecoder(V, d, hidden=5, embed=4, eos_id=V - 1)
    p = dec.init_params(np.random.default_rng(0))
    return Model(dec, ModelParams({k: np.zeros_like(v) for k, v in p.items()}))


UNIFORM_DATA = [[0, 1, 2, 3, 6], [4, 5, 6], [1, 1, 1, 1, 1, 1, 6]]


# ---------------------------------------------------------------------------
# log-mean-exp


def test_log_mean_exp_is_stable():
    assert log_mean_exp([1000.0, 1000.0]) == 1000.0
    assert log_mean_exp([-1000.0, -1000.0 + math.log(3)]) == pytest.approx(-1000.0 + math.log(2))


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)))
def test_log_mean_exp_lies_between_min_and_max(a):
    v = log_mean_exp(a)
    assert a.min() - 1e-9 <= v <= a.max() + 1e-9


@given(st.floats(-100, 100), st.integers(1, 30))
def test_log_mean_exp_of_constant(c, n):
    assert log_mean_exp(np.full(n, c)) == pytest.approx(c, abs=1e-12)


# ---------------------------------------------------------------------------
# marginal likelihood and perplexity


@pytest.mark.parametrize("M", [1, 7, 64])
def test_perfect_proposal_gives_exact_marginal(oracle_setup, M):
    model, spec, x = oracle_setup
    mean, cov = oracle_posterior(spec, x)
    rng = np.random.default_rng(M)
    for i in range(5):
        z = rng.multivariate_normal(mean[i], cov, size=M)
        lj = log_joint(model, np.repeat(x[i : i + 1], M, 0), z)
        est = importance_log_marginal(lj, gaussian_logpdf(z, mean[i], cov))
        assert est == pytest.approx(float(oracle_log_marginal(spec, x[i : i + 1])[0]), abs=1e-10)


def test_more_importance_samples_reduce_the_downward_bias(oracle_setup):
    model, spec, x = oracle_setup
    cfg = SriConfig(K=20, s=0.01)
    single = np.array([estimate_log_marginal(model, x[0], 1, cfg, seed) for seed in range(200)])
    many = estimate_log_marginal(model, x[0], 512, cfg, 1000)
    se = single.std(ddof=1) / math.sqrt(len(single))
    assert many >= single.mean() - 3 * se


def test_marginal_errors(oracle_setup):
    model, _, x = oracle_setup
    with pytest.raises(ValueError):
        log_marginals(model, x, 0, SriConfig(), 0)
    with pytest.raises(ValueError):
        perplexity(model, [], 4, SriConfig(), 0)
    bad, _ = lg([[3.0]])
    with pytest.raises(RuntimeError, match="diverged"):
        log_marginals(bad, np.array([[1.0]]), 4, SriConfig(K=200, s=1.5), 0)


def test_uniform_decoder_perplexity_is_vocab_size():
    # K = 0 makes q the prior, so every importance weight equals p(x) exactly
    model = uniform_lstm()
    assert perplexity(model, UNIFORM_DATA, 16, SriConfig(K=0), 0) == pytest.approx(7.0, rel=1e-12)


def test_uniform_decoder_reconstruction_is_length_times_log_vocab():
    model = uniform_lstm()
    rec = reconstruction_error(model, UNIFORM_DATA, 10, SriConfig(K=20, s=0.1), 0)
    assert rec == pytest.approx(np.mean([5, 3, 7]) * math.log(7), rel=1e-12)


def test_repeated_sentence_perplexity_approaches_one():
    sentence = [0, 1, 2, 3]
    dec = LSTMDecoder(4, 2, hidden=8, embed=4, eos_id=3, latent=False)
    model = Model(dec, dec.init_params(np.random.default_rng(1)))
    cfg = SriConfig(K=0)
    before = perplexity(model, [sentence], 1, cfg, 0)
    state, _ = train(model, [sentence] * 4, TrainConfig(iterations=200, batch_size=4, lr=0.05,
                                                         optimizer="adam", step_interval=201, sri=cfg))
    after = perplexity(model.with_params(state.params), [sentence], 1, cfg, 0)
    assert 1.0 < after < 1.05 < before


# ---------------------------------------------------------------------------
# reconstruction, ELBO consistency


def test_reconstruction_with_oracle_samples_matches_closed_form(oracle_setup):
    model, spec, x = oracle_setup
    mean, cov = oracle_posterior(spec, x)
    S = 20000
    rng = np.random.default_rng(5)
    z = np.stack([rng.multivariate_normal(mean[i], cov, size=S) for i in range(4)])
    got = _recon_from_samples(model, x[:4], z, np.zeros((4, S), bool))
    W, s2 = spec.W, spec.sigma2
    resid = x[:4] - mean[:4] @ W.T
    exact = 0.5 * 3 * math.log(2 * math.pi * s2) + (np.sum(resid**2, 1) + np.trace(W @ cov @ W.T)) / (2 * s2)
    np.testing.assert_allclose(got, exact, atol=1e-2)


@pytest.mark.parametrize("s", [1e-3, 1e-2, 3e-2])
def test_elbo_sandwich(oracle_setup, s):
    model, spec, x = oracle_setup
    cfg = SriConfig(K=20, s=s)
    recon, rse = reconstruction_error(model, x, 200, cfg, 0, return_se=True)
    kl, kse = kl_estimate(model, x, 200, cfg, 0, return_se=True)
    elbo = -recon - kl
    se = math.hypot(rse, kse)
    lm = log_marginals(model, x, 256, cfg, 0)
    lm_se = lm.std(ddof=1) / math.sqrt(len(lm))
    oracle = float(np.mean(oracle_log_marginal(spec, x)))
    assert elbo <= float(np.mean(lm)) + 3 * math.hypot(se, lm_se)
    assert float(np.mean(lm)) <= oracle + 3 * lm_se


# ---------------------------------------------------------------------------
# active units


def test_decoder_ignoring_z_has_no_active_units(rng):
    model, spec = lg(np.zeros((3, 2)))
    x, _ = spec.sample(30, rng)
    assert active_units(model, x, 200, SriConfig(K=20, s=0.1), 0) == 0


def test_full_rank_linear_gaussian_has_all_units_active(rng):
    model, spec = lg([[2.0, 0.0], [0.0, 1.5], [1.0, 1.0]])
    x, _ = spec.sample(50, rng)
    assert active_units(model, x, 200, SriConfig(K=20, s=0.05), 0) == 2


def test_infinite_threshold_gives_zero(oracle_setup):
    model, _, x = oracle_setup
    assert active_units(model, x, 20, SriConfig(K=5, s=0.05), 0, threshold=math.inf) == 0


def test_active_units_need_two_examples(oracle_setup):
    model, _, x = oracle_setup
    with pytest.raises(ValueError):
        active_units(model, x[:1], 5, SriConfig(), 0)


@pytest.fixture(scope="module")
def lstm_means():
    dec = LSTMDecoder(6, 4, hidden=6, embed=4, eos_id=5)
    model = Model(dec, dec.init_params(np.random.default_rng(2), scale=0.5))
    data = [[i % 5, (i * 3) % 5, 5] for i in range(12)]
    means = posterior_means(model, data, 20, SriConfig(K=10, s=0.05), 0)
    return model, data, means


@given(st.lists(st.floats(0, 2), min_size=2, max_size=6))
def test_active_units_monotone_in_threshold(lstm_means, ts):
    model, data, means = lstm_means
    counts = [active_units(model, data, 20, SriConfig(), 0, threshold=t, means=means) for t in sorted(ts)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert all(0 <= c <= 4 for c in counts)


# ---------------------------------------------------------------------------
# KL


def test_kl_is_zero_when_q_is_the_prior(oracle_setup):
    model, _, x = oracle_setup
    assert kl_estimate(model, x, 16, SriConfig(K=0), 0) == 0.0


def test_kl_non_negative_up_to_noise(lstm_means):
    model, data, _ = lstm_means
    kl, se = kl_estimate(model, data, 20, SriConfig(K=10, s=0.05), 0, return_se=True)
    assert kl >= -3 * se


@pytest.mark.xfail(strict=True, reason="conditional-path KL is off by more than 10% at the selected step size; see notes")
def test_kl_matches_closed_form_within_ten_percent(oracle_setup):
    model, spec, x = oracle_setup
    s = optimize_step_size(model, x, StepSizeGrid(samples=16), SriConfig(), 0)
    kl = kl_estimate(model, x, 500, SriConfig(K=20, s=s), 0)
    mean, cov = oracle_posterior(spec, x)
    ref = np.mean([gaussian_kl(mean[i], cov, np.zeros(2), np.eye(2)) for i in range(len(x))])
    assert abs(kl - ref) <= 0.1 * ref


# ---------------------------------------------------------------------------
# determinism, chunking, threads


def test_results_do_not_depend_on_chunking_or_threads(lstm_means):
    model, data, _ = lstm_means
    cfg = SriConfig(K=5, s=0.05)
    base = EvalConfig()
    for ecfg in (EvalConfig(chunk_chains=7), EvalConfig(chunk_chains=7, threads=3)):
        assert log_marginals(model, data, 8, cfg, 1, ecfg).tobytes() == log_marginals(model, data, 8, cfg, 1, base).tobytes()
        za, _ = posterior_samples(model, data, 5, cfg, 1, ecfg)
        zb, _ = posterior_samples(model, data, 5, cfg, 1, base)
        assert za.tobytes() == zb.tobytes()
        assert kl_estimate(model, data, 5, cfg, 1, ecfg) == kl_estimate(model, data, 5, cfg, 1, base)


def test_evaluate_is_reproducible_and_consistent(lstm_means, tmp_path):
    model, data, _ = lstm_means
    cfg = SriConfig(K=5, s=0.05)
    ecfg = EvalConfig(M=8, samples=10)
    a = evaluate(model, data, cfg, ecfg, 3, chash="abc")
    b = evaluate(model, data, cfg, ecfg, 3, chash="abc")
    assert a.to_json() == b.to_json()
    assert a.ppl == pytest.approx(math.exp(-a.log_marginal_per_token))
    assert 0 <= a.au <= model.d
    assert a.notes["kl"].startswith("KL =")
    a.write(tmp_path / "m.json", history=tmp_path / "h.jsonl")
    a.write(tmp_path / "m.json", history=tmp_path / "h.jsonl")
    assert json.loads((tmp_path / "m.json").read_text()) == a.to_dict()
    assert len((tmp_path / "h.jsonl").read_text().splitlines()) == 2


def test_config_hash_is_stable_and_order_free():
    assert config_hash({"a": 1, "b": [2, 3]}) == config_hash({"b": [2, 3], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
    assert len(config_hash({})) == 12


def test_report_roundtrips_through_json():
    r = MetricsReport(ppl=3.0, recon=1.0, au=2, kl=0.5, log_marginal_per_token=-math.log(3),
                      M=4, seed=0, config_hash="x")
    assert json.loads(r.to_json())["au"] == 2
