"""Command-line entry point: ``shortrun <subcommand> [flags]``.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid config,
4 missing or unreadable checkpoint, 5 data error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import probes
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, load_config
from .data import (
    DataError,
    Vocab,
    linear_gaussian_data,
    load_corpus,
    load_vectors,
    save_vectors,
    toy_grammar_lines,
    write_lines,
)
from .model import LinearGaussianDecoder, LSTMDecoder, Model
from .training import TrainState, load_state, save_state, train

EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DATA = 1, 2, 3, 4, 5


class CheckpointMissing(Exception):
    pass


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file of 'section.key = value' lines")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, help="run seed (overrides train.seed)")
    common.add_argument("--threads", type=int, help="worker threads for evaluation")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="shortrun", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train a model on a corpus")
    t.add_argument("--corpus", help="training corpus (text lines, or CSV vectors)")
    t.add_argument("--checkpoint", help="resume from this checkpoint")

    e = sub.add_parser("eval", parents=[common], help="write a MetricsReport")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--corpus")
    e.add_argument("--M", type=int, help="importance samples per example")

    s = sub.add_parser("sample", parents=[common], help="decode sentences from prior draws")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--n", type=int, default=10)

    i = sub.add_parser("interpolate", parents=[common], help="decode along latent line segments")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--n", type=int, default=1, help="number of paths")
    i.add_argument("--k", type=int, help="points per path")

    r = sub.add_parser("noisy-recon", parents=[common], help="reconstruction under token swaps")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--corpus")
    r.add_argument("--k", default="1,2,3,4", help="comma-separated swap counts")

    f = sub.add_parser("features", parents=[common], help="export posterior-mean features")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--corpus")
    f.add_argument("--labels", help="file with one label per corpus line")

    c = sub.add_parser("cluster", parents=[common], help="Gaussian-mixture clustering of features")
    c.add_argument("--corpus", "--features", dest="corpus", required=True, help="features CSV")
    c.add_argument("--k", type=int, default=2, help="mixture components")

    g = sub.add_parser("gen-synthetic", parents=[common], help="write synthetic corpora")
    g.add_argument("--kind", choices=["toy", "linear-gaussian"], default="toy")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--p", type=int, default=3)
    g.add_argument("--d", type=int, default=2)
    return p


# ---------------------------------------------------------------------------
# helpers


def _config(args, base=None):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed = {args.seed}")
    if args.threads is not None:
        overrides.append(f"run.threads = {args.threads}")
    if args.config is None and base is not None:
        from .config import apply_assignments, parse_assignments

        return apply_assignments(base, parse_assignments(overrides, "override"))
    return load_config(args.config, overrides)


def _stamp():
    return time.strftime("%Y%m%d-%H%M%S")


def _run_dir(root, cfg):
    d = Path(root) / f"{_stamp()}-{cfg.hash()}"
    n = 1
    while d.exists():
        d = Path(root) / f"{_stamp()}-{cfg.hash()}-{n}"
        n += 1
    for sub in ("checkpoints", "samples"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    return d


def _out_dir(args, ckpt_path):
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        return Path(args.out)
    p = Path(ckpt_path).resolve().parent
    return p.parent if p.name == "checkpoints" else p


def _tag(cfg):
    return f"{cfg.hash()}-seed{cfg.train.seed}"


def _load_data(cfg, path, vocab=None):
    if not path:
        raise DataError("no corpus given (use --corpus or paths.corpus)")
    if cfg.model.decoder == "linear_gaussian":
        return load_vectors(path), None
    corpus = load_corpus(path, vocab=vocab, lowercase=cfg.data.lowercase, level=cfg.data.level)
    return corpus.sentences, corpus.vocab


def _build_model(cfg, data, vocab, rng):
    m = cfg.model
    if m.decoder == "linear_gaussian":
        dec = LinearGaussianDecoder(p=data.shape[1], d=m.d)
        return Model(dec, dec.init_params(rng))
    dec = LSTMDecoder(len(vocab), m.d, hidden=m.hidden, embed=m.embed, eos_id=vocab.eos_id,
                      latent=m.latent)
    return Model(dec, dec.init_params(rng, scale=m.init_scale, latent_scale=m.latent_init_scale))


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise CheckpointMissing(f"checkpoint not found: {path}")
    try:
        dec, state, meta = load_state(path)
    except (CheckpointError, KeyError, ValueError) as e:
        raise CheckpointMissing(f"unreadable checkpoint {path}: {e}") from e
    vocab = Vocab(meta["vocab"]["tokens"], meta["vocab"]["level"]) if meta.get("vocab") else None
    base = None
    if meta.get("run_config"):
        from .config import apply_assignments, parse_assignments

        base = apply_assignments(RunConfig(), parse_assignments(meta["run_config"].splitlines(), path))
    return Model(dec, state.params), state, vocab, base


def _eval_cfg(cfg, M=None):
    e = cfg.eval
    return ev.EvalConfig(M=M or e.M, samples=e.samples, au_threshold=e.au_threshold,
                         chunk_chains=e.chunk_chains, threads=cfg.run.threads)


def _text(vocab, tokens):
    return vocab.decode(tokens) if vocab is not None else " ".join(map(str, tokens))


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    base = None
    state = None
    if args.checkpoint:
        model, state, vocab, base = _load_checkpoint(args.checkpoint)
    cfg = _config(args, base)
    corpus_path = args.corpus or cfg.paths.corpus
    data, built_vocab = _load_data(cfg, corpus_path, vocab=None if state is None else vocab)
    if state is None:
        vocab = built_vocab
        model = _build_model(cfg, data, vocab, np.random.default_rng([cfg.train.seed, 1]))
        state = TrainState.initial(model.params, cfg.train_config())
    run = _run_dir(args.out or cfg.paths.runs, cfg)
    (run / "config.txt").write_text(
        f"# config_hash = {cfg.hash()}\n# seed = {cfg.train.seed}\n" + cfg.to_text(), encoding="utf-8"
    )
    tcfg = cfg.train_config(trainable=("W_t",) if cfg.model.decoder == "linear_gaussian" else None)
    meta_extra = {
        "vocab": {"level": vocab.level, "tokens": vocab.itos[:-2]} if vocab else None,
        "run_config": cfg.to_text(),
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
    }

    def on_step(st, row):
        if tcfg.checkpoint_every and st.t % tcfg.checkpoint_every == 0:
            save_state(run / "checkpoints" / f"step{st.t:07d}.ckpt", model, st, tcfg, meta_extra)

    state, rows = train(model, data, tcfg, state=state, log_path=run / "logs.jsonl", callback=on_step)
    final = run / "checkpoints" / "final.ckpt"
    save_state(final, model, state, tcfg, meta_extra)
    last = rows[-1] if rows else {}
    print(json.dumps({"run_dir": str(run), "checkpoint": str(final), "iterations": state.t,
                      "loss": last.get("loss"), "step_size": state.step_size,
                      "config_hash": cfg.hash(), "seed": cfg.train.seed}))
    return 0


def cmd_eval(args):
    model, state, vocab, base = _load_checkpoint(args.checkpoint)
    cfg = _config(args, base)
    data, _ = _load_data(cfg, args.corpus or cfg.paths.corpus, vocab)
    ecfg = _eval_cfg(cfg, args.M)
    report = ev.evaluate(model, data, cfg.sri_config(state.step_size), ecfg, cfg.train.seed, cfg.hash())
    out = _out_dir(args, args.checkpoint)
    report.write(out / "metrics.json", history=out / "history.jsonl")
    print(report.to_json())
    return 0


def cmd_sample(args):
    model, state, vocab, base = _load_checkpoint(args.checkpoint)
    cfg = _config(args, base)
    if args.n < 0:
        raise ValueError("--n must be >= 0")
    out = _out_dir(args, args.checkpoint) / "samples"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.train.seed, 201])
    if isinstance(model.decoder, LinearGaussianDecoder):
        path = out / f"samples-{_tag(cfg)}.csv"
        z = rng.standard_normal((args.n, model.d))
        x = z @ np.asarray(model.params["W_t"])
        path.write_text("" if args.n == 0 else "\n".join(",".join(repr(float(v)) for v in r) for r in x) + "\n")
    else:
        path = out / f"samples-{_tag(cfg)}.txt"
        sents = probes.sample_sentences(model, args.n, rng, cfg.eval.max_len)
        probes.write_sentences(path, [[_text(vocab, s.tokens) for s in sents]])
    print(path)
    return 0


def cmd_interpolate(args):
    model, state, vocab, base = _load_checkpoint(args.checkpoint)
    cfg = _config(args, base)
    steps = args.k or cfg.eval.interpolation_steps
    rng = np.random.default_rng([cfg.train.seed, 202])
    blocks = []
    for _ in range(args.n):
        z1, z2 = rng.standard_normal((2, model.d))
        path = probes.interpolate(model, z1, z2, steps, cfg.eval.max_len)
        blocks.append([_text(vocab, s.tokens) for s in path.sentences])
    out = _out_dir(args, args.checkpoint) / "samples"
    target = out / f"interpolate-{_tag(cfg)}.txt"
    probes.write_sentences(target, blocks)
    print(target)
    return 0


def cmd_noisy_recon(args):
    model, state, vocab, base = _load_checkpoint(args.checkpoint)
    cfg = _config(args, base)
    data, _ = _load_data(cfg, args.corpus or cfg.paths.corpus, vocab)
    try:
        ks = [int(v) for v in args.k.split(",") if v.strip()]
    except ValueError as e:
        raise ValueError(f"--k expects comma-separated integers, got {args.k!r}") from e
    sweep = probes.noisy_reconstruction_sweep(
        model, data, ks, cfg.eval.samples, cfg.sri_config(state.step_size), cfg.train.seed,
        _eval_cfg(cfg), eos=vocab.eos_id if vocab else None,
    )
    out = _out_dir(args, args.checkpoint)
    target = out / f"noisy-recon-{_tag(cfg)}.tsv"
    lines = [f"# config_hash={cfg.hash()} seed={cfg.train.seed}", "k\trecon"]
    lines += [f"{k}\t{v:.6f}" for k, v in sweep.items()]
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines[1:]))
    return 0


def cmd_features(args):
    model, state, vocab, base = _load_checkpoint(args.checkpoint)
    cfg = _config(args, base)
    data, _ = _load_data(cfg, args.corpus or cfg.paths.corpus, vocab)
    labels = None
    if args.labels:
        from .data import read_lines

        labels = read_lines(args.labels)
        if len(labels) != len(data):
            raise DataError(f"{len(labels)} labels for {len(data)} examples")
    fm = probes.extract_features(model, data, cfg.eval.samples, cfg.sri_config(state.step_size),
                                 cfg.train.seed, labels, _eval_cfg(cfg))
    out = _out_dir(args, args.checkpoint)
    target = out / f"features-{_tag(cfg)}.csv"
    fm.write_csv(target)
    print(target)
    return 0


def cmd_cluster(args):
    cfg = _config(args)
    try:
        fm = probes.FeatureMatrix.read_csv(args.corpus)
    except (OSError, ValueError, IndexError) as e:
        raise DataError(f"cannot read features {args.corpus}: {e}") from e
    res = probes.gmm_cluster(fm, args.k, np.random.default_rng([cfg.train.seed, 203]))
    out = Path(args.out or Path(args.corpus).parent)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "components": args.k,
        "accuracy": res.accuracy,
        "log_likelihood": res.log_likelihood[-1],
        "restarts": res.restarts,
        "assignments": res.assignments.tolist(),
    }
    target = out / f"clusters-{_tag(cfg)}.json"
    target.write_text(json.dumps(doc) + "\n", encoding="utf-8")
    print(json.dumps({k: v for k, v in doc.items() if k != "assignments"}))
    return 0


def cmd_gen_synthetic(args):
    cfg = _config(args)
    seed = cfg.train.seed
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([seed, 204])
    if args.kind == "toy":
        corpus = out / f"toy-seed{seed}.txt"
        write_lines(corpus, toy_grammar_lines(args.n, rng))
        truth = {"kind": "toy", "grammar": "a^n b^n c", "n_range": [1, 8], "level": "char"}
    else:
        x, _, spec = linear_gaussian_data(args.n, args.p, args.d, rng)
        corpus = out / f"linear-gaussian-seed{seed}.csv"
        save_vectors(corpus, x)
        truth = {"kind": "linear_gaussian", "W": spec.W.tolist(), "sigma2": spec.sigma2,
                 "p": args.p, "d": args.d}
    truth.update({"seed": seed, "config_hash": cfg.hash(), "n": args.n, "corpus": corpus.name})
    target = out / f"{corpus.stem}.truth.json"
    target.write_text(json.dumps(truth, indent=2) + "\n", encoding="utf-8")
    print(corpus)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "noisy-recon": cmd_noisy_recon,
    "features": cmd_features,
    "cluster": cmd_cluster,
    "gen-synthetic": cmd_gen_synthetic,
}


def run_cli(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: invalid config: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointMissing as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as e:
        print(f"error: data: {e}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, FloatingPointError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
