"""Maximum-likelihood learning with short-run posterior samples.

Each iteration samples z for every example by short-run Langevin from the
prior, then takes one ascent step on the average log p(x, z) over the
non-divergent chains.  The Langevin step size is re-tuned by grid search
every ``step_interval`` iterations.

All randomness is keyed by (seed, iteration, example index), so a run
resumed from a checkpoint continues exactly as the uninterrupted run would.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .model import ModelParams, grad_params_log_joint
from .sri import (
    DEFAULT_GRID,
    SriConfig,
    StepSizeGrid,
    chain_inputs,
    optimize_step_size,
    repeat_examples,
    short_run_infer,
)

# stream ids for chain_inputs; training streams are offset by the iteration
STEP_SIZE_STREAM = 1 << 40
RESIDUAL_STREAM = 2 << 40


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.0
    optimizer: str = "sgd"
    step_interval: int = 500
    grid: tuple = DEFAULT_GRID
    grid_samples: int = 4
    samples: int = 1
    clip: float | None = None
    trainable: tuple | None = None
    seed: int = 0
    checkpoint_every: int = 0
    sri: SriConfig = field(default_factory=SriConfig)

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.step_interval < 1:
            raise ValueError("step-size interval must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, t):
        return self.lr / (1.0 + self.lr_decay * t)

    def with_(self, **kw):
        return replace(self, **kw)


@dataclass
class TrainState:
    params: ModelParams
    t: int = 0
    step_size: float = 0.1
    opt: dict = field(default_factory=dict)
    divergent_total: int = 0
    loss_ema: float | None = None

    @classmethod
    def initial(cls, params, cfg):
        return cls(params=params, step_size=cfg.sri.s)


# ---------------------------------------------------------------------------
# optimizers (ascent)


def _apply_update(params, grads, state, cfg, t):
    lr = cfg.lr_at(t)
    new = {}
    opt = dict(state.opt)
    for name, g in grads.items():
        theta = params[name]
        if cfg.optimizer == "sgd":
            new[name] = theta + lr * g
            continue
        b1, b2, eps = 0.9, 0.999, 1e-8
        m = b1 * opt.get(f"m.{name}", np.zeros_like(g)) + (1 - b1) * g
        v = b2 * opt.get(f"v.{name}", np.zeros_like(g)) + (1 - b2) * g * g
        opt[f"m.{name}"], opt[f"v.{name}"] = m, v
        mhat = m / (1 - b1 ** (t + 1))
        vhat = v / (1 - b2 ** (t + 1))
        new[name] = theta + lr * mhat / (np.sqrt(vhat) + eps)
    return params.replace(**new), opt


def _clip(grads, max_norm):
    if max_norm is None:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


# ---------------------------------------------------------------------------


def batch_indices(n, batch_size, seed, t):
    """Example indices for iteration ``t``: per-epoch shuffles keyed by (seed, epoch)."""
    per_epoch = max(1, n // batch_size)
    m = min(batch_size, n)
    epoch, b = divmod(t, per_epoch)
    perm = np.random.default_rng([int(seed), 7, int(epoch)]).permutation(n)
    return perm[b * m : (b + 1) * m]


def train_step(model, state, examples, cfg, example_ids=None):
    """One learning iteration on ``examples``.

    The reported loss is -mean log p(x, zK) under the pre-update parameters.

    Returns:
        (new TrainState, log row dict)
    """
    t0 = time.perf_counter()
    n = len(examples)
    ids = list(range(n)) if example_ids is None else list(example_ids)
    S = cfg.samples
    m = model.with_params(state.params)
    sri = cfg.sri.with_(s=state.step_size, track_jacobian=False)
    z0, noise = chain_inputs(cfg.seed, n, S, sri.K, m.d, stream=state.t + 1, example_ids=ids)
    rep = repeat_examples(examples, S)
    batch = m.decoder.prepare(rep)
    rec = short_run_infer(m, batch, sri, z0=z0, noise=noise)
    ok = ~rec.divergent
    n_ok = int(ok.sum())
    if n_ok == 0:
        raise RuntimeError(
            f"all {len(ok)} chains diverged at iteration {state.t} (step size {state.step_size})"
        )
    weights = ok / n_ok
    zK = np.where(ok[:, None], rec.zK, 0.0)
    lj, grads = grad_params_log_joint(m, batch, zK, cfg.trainable, weights)
    loss = -float(np.sum(lj[ok]) / n_ok)
    grads = _clip(grads, cfg.clip)
    params, opt = _apply_update(state.params, grads, state, cfg, state.t)
    if not np.all(np.isfinite(params.flat())):
        raise FloatingPointError(f"non-finite parameter update at iteration {state.t}")
    ema = loss if state.loss_ema is None else 0.98 * state.loss_ema + 0.02 * loss
    new = TrainState(
        params=params,
        t=state.t + 1,
        step_size=state.step_size,
        opt=opt,
        divergent_total=state.divergent_total + rec.n_divergent,
        loss_ema=ema,
    )
    row = {
        "iter": state.t,
        "loss": loss,
        "step_size": state.step_size,
        "divergent_chains": rec.n_divergent,
        "wall_ms": (time.perf_counter() - t0) * 1e3,
    }
    return new, row


def train(model, examples, cfg, state=None, log_path=None, checkpoint_dir=None, callback=None):
    """Run iterations ``state.t .. cfg.iterations - 1``.

    Returns:
        (final TrainState, list of log rows)
    """
    if len(examples) == 0:
        raise ValueError("empty corpus")
    if state is None:
        state = TrainState.initial(model.params, cfg)
    grid = StepSizeGrid(cfg.grid, cfg.grid_samples)
    rows = []
    log_f = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.t < cfg.iterations:
            t = state.t
            idx = batch_indices(len(examples), cfg.batch_size, cfg.seed, t)
            batch = _take(examples, idx)
            state, row = train_step(model, state, batch, cfg, example_ids=idx)
            if (t + 1) % cfg.step_interval == 0:
                m = model.with_params(state.params)
                state.step_size = optimize_step_size(
                    m, batch, grid, cfg.sri, cfg.seed, stream=STEP_SIZE_STREAM + t
                )
                row["new_step_size"] = state.step_size
            rows.append(row)
            if log_f:
                log_f.write(json.dumps(row) + "\n")
            if checkpoint_dir and cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
                save_state(Path(checkpoint_dir) / f"step{state.t:07d}.ckpt", model, state, cfg)
            if callback is not None:
                callback(state, row)
    finally:
        if log_f:
            log_f.close()
    return state, rows


def _take(examples, idx):
    if isinstance(examples, np.ndarray):
        return examples[idx]
    return [examples[i] for i in idx]


# ---------------------------------------------------------------------------
# convergence diagnostic


def fixed_point_residual(
    model, examples, cfg, samples=1, seed=0, trainable=None, groups=20, sampler=None,
    return_se=False,
):
    """Norm of the Monte Carlo average of d/dtheta log p(x, z), z ~ q(z | x).

    At a fixed point of the learning iteration this average is zero, so the
    norm should sit at the Monte Carlo noise floor.  The floor is estimated
    from the spread of ``groups`` disjoint group means.

    ``sampler(examples, ids)`` may replace the short-run chains with any
    other posterior sampler returning one z row per (example, sample).
    """
    n = len(examples)
    groups = max(1, min(groups, n))
    bounds = np.linspace(0, n, groups + 1).astype(int)
    means = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        ids = np.arange(lo, hi)
        ex = _take(examples, ids)
        rep = repeat_examples(ex, samples)
        batch = model.decoder.prepare(rep)
        if sampler is not None:
            zK = sampler(rep, np.repeat(ids, samples))
        else:
            z0, noise = chain_inputs(seed, len(ids), samples, cfg.K, model.d, RESIDUAL_STREAM, ids)
            rec = short_run_infer(model, batch, cfg.with_(track_jacobian=False), z0=z0, noise=noise)
            zK = np.where(rec.divergent[:, None], 0.0, rec.zK)
            if rec.n_divergent:
                raise RuntimeError("divergent chains in residual evaluation")
        _, grads = grad_params_log_joint(model, batch, zK, trainable)
        flat = np.concatenate([np.ravel(g) for g in grads.values()])
        means.append(flat / len(rep))
    means = np.array(means)
    sizes = np.diff(bounds)
    avg = np.average(means, axis=0, weights=sizes)
    norm = float(np.linalg.norm(avg))
    if not return_se:
        return norm
    if groups < 2:
        return norm, float("inf")
    var = np.var(means, axis=0, ddof=1) / groups
    return norm, float(math.sqrt(np.sum(var)))


# ---------------------------------------------------------------------------
# checkpoints


def save_state(path, model, state, cfg=None, extra=None):
    meta = {
        "decoder": model.decoder.config(),
        "t": state.t,
        "step_size": state.step_size,
        "divergent_total": state.divergent_total,
        "loss_ema": state.loss_ema,
        "train_config": _cfg_echo(cfg) if cfg is not None else None,
        "param_names": state.params.names,
        "opt_names": list(state.opt),
    }
    meta.update(extra or {})
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"opt/{k}": v for k, v in state.opt.items()})
    ckpt.write_container(path, meta, arrays)


def load_state(path):
    """Returns (decoder, TrainState, meta)."""
    from .model import decoder_from_config

    meta, arrays = ckpt.read_container(path)
    params = ModelParams({k: arrays[f"param/{k}"] for k in meta["param_names"]})
    opt = {k: arrays[f"opt/{k}"] for k in meta["opt_names"]}
    state = TrainState(
        params=params,
        t=meta["t"],
        step_size=meta["step_size"],
        opt=opt,
        divergent_total=meta["divergent_total"],
        loss_ema=meta["loss_ema"],
    )
    return decoder_from_config(meta["decoder"]), state, meta


def _cfg_echo(cfg):
    d = dict(cfg.__dict__)
    d["sri"] = dict(cfg.sri.__dict__)
    d["grid"] = list(cfg.grid)
    d["trainable"] = list(cfg.trainable) if cfg.trainable else None
    return d
