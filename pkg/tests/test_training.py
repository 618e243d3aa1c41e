import json

import numpy as np
import pytest

from shortrun.experiments import toy_corpus
from shortrun.model import (
    LinearGaussianDecoder,
    LinearGaussianSpec,
    LSTMDecoder,
    Model,
    grad_params_log_joint,
    log_joint,
    oracle_log_marginal,
    oracle_posterior,
)
from shortrun.sri import SriConfig, chain_inputs, short_run_infer, tilde_Q
from shortrun.training import (
    TrainConfig,
    TrainState,
    _apply_update,
    batch_indices,
    fixed_point_residual,
    load_state,
    save_state,
    train,
    train_step,
)


def lg_model(W, sigma2=1.0):
    spec = LinearGaussianSpec(np.atleast_2d(W), sigma2)
    return Model(LinearGaussianDecoder(spec.p, spec.d), spec.params())


@pytest.fixture(scope="module")
def toy():
    data, vocab = toy_corpus(40, seed=3)
    dec = LSTMDecoder(len(vocab), 2, hidden=6, embed=4, eos_id=vocab.eos_id)
    model = Model(dec, dec.init_params(np.random.default_rng(5)))
    return model, data


def test_config_validation():
    for kw in ({"iterations": -1}, {"batch_size": 0}, {"lr": -0.1}, {"step_interval": 0},
               {"optimizer": "rmsprop"}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


def test_batch_indices_cover_each_epoch_once():
    seen = np.concatenate([batch_indices(10, 3, 0, t) for t in range(3)])
    assert len(set(seen.tolist())) == 9
    assert not np.array_equal(batch_indices(10, 3, 0, 0), batch_indices(10, 3, 0, 3))


# ---------------------------------------------------------------------------
# train_step


def test_zero_learning_rate_leaves_params_unchanged(toy):
    model, data = toy
    cfg = TrainConfig(iterations=1, lr=0.0, sri=SriConfig(K=5, s=0.05))
    state = TrainState.initial(model.params, cfg)
    new, row = train_step(model, state, data[:8], cfg)
    assert new.params.equals(model.params)
    assert np.isfinite(row["loss"]) and row["loss"] > 0
    assert new.t == 1


def test_loss_is_computed_before_the_update(toy):
    model, data = toy
    cfg = TrainConfig(lr=0.5, sri=SriConfig(K=5, s=0.05), seed=2)
    state = TrainState.initial(model.params, cfg)
    batch = data[:6]
    _, row = train_step(model, state, batch, cfg)
    z0, noise = chain_inputs(2, 6, 1, 5, model.d, stream=1)
    rec = short_run_infer(model, model.decoder.prepare(batch), cfg.sri, z0=z0, noise=noise)
    assert row["loss"] == pytest.approx(-np.mean(log_joint(model, batch, rec.zK)), rel=1e-12)


def test_update_is_the_mean_gradient_when_nothing_diverges(toy):
    model, data = toy
    cfg = TrainConfig(lr=0.1, sri=SriConfig(K=5, s=0.05), seed=4)
    state = TrainState.initial(model.params, cfg)
    batch = data[:6]
    new, row = train_step(model, state, batch, cfg)
    assert row["divergent_chains"] == 0
    z0, noise = chain_inputs(4, 6, 1, 5, model.d, stream=1)
    b = model.decoder.prepare(batch)
    rec = short_run_infer(model, b, cfg.sri, z0=z0, noise=noise)
    _, g = grad_params_log_joint(model, b, rec.zK)
    for name, theta in model.params.items():
        np.testing.assert_allclose(new.params[name], theta + 0.1 * g[name] / 6, atol=1e-13)


def test_all_divergent_chains_abort():
    model = lg_model([[3.0]])
    x = np.array([[1.0], [2.0]])
    cfg = TrainConfig(sri=SriConfig(K=200, s=1.5))
    with pytest.raises(RuntimeError, match="diverged"):
        train_step(model, TrainState.initial(model.params, cfg), x, cfg)


def test_non_finite_update_is_an_error():
    model = lg_model([[1.0]])
    x = np.array([[50.0]])
    cfg = TrainConfig(lr=1e308, sri=SriConfig(K=1, s=0.01))
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        train_step(model, TrainState.initial(model.params, cfg), x, cfg)


def test_fixed_pair_ascent_is_monotone(toy):
    model, data = toy
    batch = model.decoder.prepare(data[:1])
    z = np.array([[0.4, -0.7]])
    cfg = TrainConfig(lr=1e-3)
    state = TrainState.initial(model.params, cfg)
    params, prev = model.params, -np.inf
    for t in range(100):
        lj, g = grad_params_log_joint(model.with_params(params), batch, z)
        assert lj[0] >= prev - 1e-12
        prev = lj[0]
        params, _ = _apply_update(params, g, state, cfg, t)


# ---------------------------------------------------------------------------
# train


def test_zero_iterations_returns_initial_params(toy):
    model, data = toy
    state, rows = train(model, data, TrainConfig(iterations=0))
    assert rows == [] and state.params.equals(model.params) and state.t == 0


def test_empty_corpus_rejected(toy):
    with pytest.raises(ValueError):
        train(toy[0], [], TrainConfig(iterations=1))


def test_step_size_constant_when_interval_exceeds_run(toy):
    model, data = toy
    T = 4
    cfg = TrainConfig(iterations=T, batch_size=8, lr=0.01, step_interval=T + 1,
                      sri=SriConfig(K=5, s=0.05))
    state, rows = train(model, data, cfg)
    assert [r["step_size"] for r in rows] == [0.05] * T
    assert not any("new_step_size" in r for r in rows)
    assert state.step_size == 0.05


def test_step_size_refreshed_every_interval(toy):
    model, data = toy
    cfg = TrainConfig(iterations=4, batch_size=8, lr=0.01, step_interval=2, grid=(0.01, 0.05),
                      grid_samples=2, sri=SriConfig(K=5, s=0.05))
    _, rows = train(model, data, cfg)
    assert ["new_step_size" in r for r in rows] == [False, True, False, True]
    assert rows[2]["step_size"] == rows[1]["new_step_size"]


def test_log_rows_and_file(toy, tmp_path):
    model, data = toy
    log = tmp_path / "logs.jsonl"
    cfg = TrainConfig(iterations=3, batch_size=8, lr=0.01, sri=SriConfig(K=3, s=0.05))
    _, rows = train(model, data, cfg, log_path=log)
    lines = [json.loads(line) for line in log.read_text().splitlines()]
    assert lines == rows
    assert [r["iter"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"iter", "loss", "step_size", "divergent_chains", "wall_ms"}


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_resume_is_bit_exact(toy, tmp_path, optimizer):
    model, data = toy
    cfg = TrainConfig(iterations=8, batch_size=16, lr=0.01, optimizer=optimizer, clip=5.0,
                      step_interval=3, grid=(0.01, 0.05), grid_samples=2, checkpoint_every=4,
                      seed=9, sri=SriConfig(K=5, s=0.05))
    full, rows_full = train(model, data, cfg, checkpoint_dir=tmp_path)
    dec, mid, _ = load_state(tmp_path / "step0000004.ckpt")
    assert mid.t == 4
    resumed, rows_rest = train(Model(dec, mid.params), data, cfg, state=mid)
    assert resumed.params.flat().tobytes() == full.params.flat().tobytes()
    assert resumed.step_size == full.step_size
    for a, b in zip(rows_full[4:], rows_rest):
        assert a["loss"] == b["loss"]


def test_checkpoint_round_trip_keeps_optimizer_state(toy, tmp_path):
    model, data = toy
    cfg = TrainConfig(iterations=2, batch_size=8, lr=0.01, optimizer="adam", sri=SriConfig(K=3, s=0.05))
    state, _ = train(model, data, cfg)
    save_state(tmp_path / "a.ckpt", model, state, cfg, extra={"note": "x"})
    dec, back, meta = load_state(tmp_path / "a.ckpt")
    assert meta["note"] == "x" and meta["train_config"]["optimizer"] == "adam"
    assert back.params.equals(state.params) and back.t == state.t
    assert set(back.opt) == set(state.opt)
    for k in state.opt:
        assert back.opt[k].tobytes() == state.opt[k].tobytes()
    assert dec.config() == model.decoder.config()


# ---------------------------------------------------------------------------
# recovery and the fixed-point residual


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(31)
    truth = LinearGaussianSpec(np.array([[2.0]]), 1.0)
    x, _ = truth.sample(2000, rng)
    model = lg_model([[0.5]])
    sri = SriConfig(K=20, s=0.03)
    cfg = TrainConfig(iterations=1500, batch_size=50, lr=0.1, lr_decay=0.005, step_interval=1501,
                      trainable=("W_t",), seed=31, sri=sri)
    state, _ = train(model, x, cfg)
    return model, model.with_params(state.params), x, sri


def test_recovers_generating_weight(fitted):
    _, m, _, _ = fitted
    assert abs(abs(m.params["W_t"][0, 0]) - 2.0) < 0.1


def test_only_trainable_blocks_move(fitted):
    start, m, _, _ = fitted
    assert m.params["log_sigma2"].tobytes() == start.params["log_sigma2"].tobytes()


def test_residual_large_before_and_at_noise_floor_after(fitted):
    start, m, x, sri = fitted
    r0, se0 = fixed_point_residual(start, x, sri, 1, 5, ("W_t",), return_se=True)
    r, se = fixed_point_residual(m, x, sri, 1, 5, ("W_t",), return_se=True)
    assert r0 > 10 * se0
    assert r <= 3 * se


def test_residual_is_zero_at_mle_with_exact_posterior(rng):
    x = rng.normal(0.0, np.sqrt(5.0), size=(500, 1))
    W = np.sqrt(np.mean(x**2) - 1.0)
    spec = LinearGaussianSpec(np.array([[W]]), 1.0)
    model = lg_model(spec.W)
    mean, cov = oracle_posterior(spec, x)
    sd = np.sqrt(cov[0, 0])

    def two_point(rep, ids):
        # nodes m +- sd integrate the quadratic score exactly
        signs = np.tile([1.0, -1.0], len(rep) // 2)
        return mean[ids] + sd * signs[:, None]

    r = fixed_point_residual(model, x, SriConfig(), samples=2, trainable=("W_t",), sampler=two_point)
    assert r < 1e-12


@pytest.mark.xfail(strict=True, reason="short-run bias at desk scale exceeds 0.1 nat; see notes")
def test_final_tilde_Q_near_oracle_marginal(fitted):
    _, m, x, sri = fitted
    spec = LinearGaussianSpec.from_params(m.params)
    q = tilde_Q(m, x[:200], sri.s, 16, sri, seed=3)
    assert abs(q - float(np.mean(oracle_log_marginal(spec, x[:200])))) < 0.1
