"""Latent-space probes: decoding from the prior, interpolation, swap noise,
feature export and Gaussian-mixture clustering of posterior means.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .evaluation import _recon_from_samples, posterior_means, posterior_samples

NOISY_STREAM = 105


@dataclass
class Decoded:
    tokens: list
    truncated: bool


def greedy_decode(model, z, max_len=50):
    """Argmax decoding from a single latent; halts at end-of-sentence or ``max_len``."""
    outs, trunc = model.decoder.greedy(model.params, np.atleast_2d(z), max_len)
    return Decoded(outs[0], trunc[0])


def decode_batch(model, z, max_len=50):
    outs, trunc = model.decoder.greedy(model.params, np.atleast_2d(z), max_len)
    return [Decoded(o, t) for o, t in zip(outs, trunc)]


def sample_sentences(model, n, rng, max_len=50):
    if n == 0:
        return []
    z = rng.standard_normal((n, model.d))
    return decode_batch(model, z, max_len)


@dataclass
class InterpolationPath:
    z1: np.ndarray
    z2: np.ndarray
    steps: int
    latents: np.ndarray
    sentences: list


def interpolate(model, z1, z2, steps=6, max_len=50):
    if steps < 2:
        raise ValueError("interpolation needs at least 2 points")
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    alpha = np.linspace(0.0, 1.0, steps)[:, None]
    lat = (1.0 - alpha) * z1 + alpha * z2
    # exact endpoints, free of rounding in the affine combination
    lat[0], lat[-1] = z1, z2
    return InterpolationPath(z1, z2, steps, lat, decode_batch(model, lat, max_len))


# ---------------------------------------------------------------------------
# noisy reconstruction


def swap_noise(x, k, rng, eos=None):
    """Apply ``k`` transpositions of two distinct positions.

    A trailing ``eos`` token, if given, stays in place.
    """
    x = list(x)
    if k < 0:
        raise ValueError("swap count must be >= 0")
    n = len(x) - 1 if (eos is not None and x and x[-1] == eos) else len(x)
    if k == 0:
        return x
    if n < 2:
        raise ValueError("need at least two content tokens to swap")
    for _ in range(k):
        i, j = rng.choice(n, size=2, replace=False)
        x[i], x[j] = x[j], x[i]
    return x


def noisy_reconstruction(model, corpus, k, samples, cfg, seed, ecfg=None, eos=None):
    """E_q[-log p(x | z)] with z inferred from a swapped copy of x, scored on clean x.

    Sentences too short to swap are scored unperturbed.  With k = 0 this is
    the plain reconstruction error under the same chains.  The swap stream
    does not depend on k, so the k-swap copy extends the (k-1)-swap copy.
    """
    noisy = []
    for i, x in enumerate(corpus):
        rng = np.random.default_rng([int(seed), NOISY_STREAM, i])
        n = len(x) - (1 if eos is not None and x[-1] == eos else 0)
        noisy.append(swap_noise(x, k, rng, eos) if n >= 2 else list(x))
    z, div = posterior_samples(model, corpus, samples, cfg, seed, ecfg, infer_from=noisy)
    return float(np.nanmean(_recon_from_samples(model, corpus, z, div)))


def noisy_reconstruction_sweep(model, corpus, ks, samples, cfg, seed, ecfg=None, eos=None):
    return {int(k): noisy_reconstruction(model, corpus, k, samples, cfg, seed, ecfg, eos) for k in ks}


# ---------------------------------------------------------------------------
# features and clustering


@dataclass
class FeatureMatrix:
    values: np.ndarray
    labels: np.ndarray | None = None

    @property
    def shape(self):
        return self.values.shape

    def header(self):
        cols = [f"dim_{j}" for j in range(self.values.shape[1])]
        return cols + (["label"] if self.labels is not None else [])

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(self.header())
            for i, row in enumerate(self.values):
                cells = [repr(float(v)) for v in row]
                if self.labels is not None:
                    cells.append(str(self.labels[i]))
                w.writerow(cells)

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="", encoding="utf-8") as f:
            rows = list(csv.reader(f))
        head, body = rows[0], rows[1:]
        has_label = head[-1] == "label"
        nd = len(head) - int(has_label)
        values = np.array([[float(c) for c in r[:nd]] for r in body]).reshape(len(body), nd)
        labels = np.array([r[nd] for r in body]) if has_label else None
        return cls(values, labels)


def extract_features(model, corpus, samples, cfg, seed, labels=None, ecfg=None):
    mu = posterior_means(model, corpus, samples, cfg, seed, ecfg)
    if not np.all(np.isfinite(mu)):
        raise FloatingPointError("non-finite posterior mean")
    return FeatureMatrix(mu, None if labels is None else np.asarray(labels))


@dataclass
class GMMResult:
    assignments: np.ndarray
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    log_likelihood: list
    accuracy: float | None = None
    restarts: int = 0


class DegenerateFit(Exception):
    pass


def _log_gauss(X, mean, cov):
    L = np.linalg.cholesky(cov)
    sol = np.linalg.solve(L, (X - mean).T)
    d = X.shape[1]
    return -0.5 * (d * math.log(2 * math.pi) + np.sum(sol * sol, axis=0)) - np.sum(np.log(np.diag(L)))


def _em(X, k, rng, max_iter, tol, reg):
    n, d = X.shape
    means = X[rng.choice(n, size=k, replace=False)].copy()
    cov0 = np.cov(X.T).reshape(d, d) + reg * np.eye(d)
    covs = np.repeat(cov0[None], k, axis=0)
    w = np.full(k, 1.0 / k)
    history = []
    for _ in range(max_iter):
        try:
            logp = np.stack([np.log(w[j]) + _log_gauss(X, means[j], covs[j]) for j in range(k)], 1)
        except np.linalg.LinAlgError as e:
            raise DegenerateFit(str(e)) from e
        mx = logp.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(logp - mx).sum(axis=1))
        ll = float(lse.sum())
        if history and ll < history[-1] - 1e-8 * max(1.0, abs(history[-1])):
            raise AssertionError(f"EM log-likelihood decreased: {history[-1]} -> {ll}")
        history.append(ll)
        if len(history) > 1 and ll - history[-2] < tol * max(1.0, abs(ll)):
            break
        r = np.exp(logp - lse[:, None])
        nk = r.sum(axis=0)
        if np.any(nk < 1e-8 * n):
            raise DegenerateFit("empty component")
        w = nk / n
        means = (r.T @ X) / nk[:, None]
        for j in range(k):
            diff = X - means[j]
            covs[j] = (r[:, j, None] * diff).T @ diff / nk[j] + reg * np.eye(d)
    return logp.argmax(axis=1), w, means, covs, history


def match_accuracy(assign, labels, k):
    """Accuracy of ``assign`` under the best cluster -> label map.

    Exhaustive for k <= 8 (injective when there are at least as many labels as
    clusters, otherwise clusters map to their majority label), greedy above.
    """
    classes, y = np.unique(labels, return_inverse=True)
    c = len(classes)
    counts = np.zeros((k, c), dtype=np.int64)
    np.add.at(counts, (assign, y), 1)
    n = len(y)
    if k > c:
        return float(counts.max(axis=1).sum() / n)
    if k <= 8:
        best = 0
        for perm in itertools.permutations(range(c), k):
            best = max(best, sum(counts[j, perm[j]] for j in range(k)))
        return float(best / n)
    used_rows, used_cols, total = set(), set(), 0
    for flat in np.argsort(-counts, axis=None):
        j, lab = divmod(int(flat), c)
        if j in used_rows or lab in used_cols:
            continue
        used_rows.add(j)
        used_cols.add(lab)
        total += counts[j, lab]
    return float(total / n)


def gmm_cluster(features, components, rng, labels=None, max_iter=200, tol=1e-9, reg=1e-6,
                max_restarts=10):
    """Full-covariance Gaussian mixture by EM, restarted with jitter on degeneracy."""
    X = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, float)
    if labels is None and isinstance(features, FeatureMatrix):
        labels = features.labels
    if components < 1:
        raise ValueError("need at least one component")
    if X.shape[0] < components:
        raise ValueError("fewer rows than components")
    jitter = 0.0
    for attempt in range(max_restarts + 1):
        Xj = X + jitter * rng.standard_normal(X.shape) if jitter else X
        try:
            assign, w, means, covs, hist = _em(Xj, components, rng, max_iter, tol, reg)
            break
        except DegenerateFit:
            jitter = max(1e-6, 10 * jitter) * (1.0 + float(np.std(X)))
    else:
        raise RuntimeError(f"EM degenerate after {max_restarts} restarts")
    acc = None if labels is None else match_accuracy(assign, np.asarray(labels), components)
    return GMMResult(assign, w, means, covs, hist, acc, attempt)


def write_sentences(path, blocks):
    """UTF-8 text, one sentence per line, blocks separated by a blank line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\n\n".join("\n".join(b) for b in blocks if b))
        if any(blocks):
            f.write("\n")
