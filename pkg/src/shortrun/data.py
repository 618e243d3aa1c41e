"""Line corpora, vocabularies and synthetic data with known ground truth."""

from __future__ import annotations

import json
import warnings
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EOS = "<eos>"
UNK = "<unk>"


class DataError(Exception):
    pass


class Vocab:
    """Token <-> id bijection; content tokens first, then ``<eos>`` and ``<unk>``."""

    def __init__(self, tokens, level="word"):
        tokens = list(tokens)
        if EOS in tokens or UNK in tokens:
            raise DataError("reserved token in content vocabulary")
        self.level = level
        self.itos = tokens + [EOS, UNK]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def build(cls, token_lists, level="word"):
        counts = Counter(t for toks in token_lists for t in toks)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(ordered, level)

    def __len__(self):
        return len(self.itos)

    @property
    def eos_id(self):
        return self.stoi[EOS]

    @property
    def unk_id(self):
        return self.stoi[UNK]

    def encode(self, tokens):
        unk = self.unk_id
        return [self.stoi.get(t, unk) for t in tokens] + [self.eos_id]

    def decode_tokens(self, ids):
        ids = list(ids)
        if ids and ids[-1] == self.eos_id:
            ids = ids[:-1]
        return [self.itos[i] for i in ids]

    def decode(self, ids):
        toks = self.decode_tokens(ids)
        return "".join(toks) if self.level == "char" else " ".join(toks)

    def save(self, path):
        Path(path).write_text(
            json.dumps({"level": self.level, "tokens": self.itos[:-2]}, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path):
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise DataError(f"cannot read vocabulary {path}: {e}") from e
        return cls(obj["tokens"], obj.get("level", "word"))


@dataclass
class Corpus:
    sentences: list
    vocab: Vocab
    split: str = "train"

    def __len__(self):
        return len(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    def texts(self):
        return [self.vocab.decode(s) for s in self.sentences]

    def n_tokens(self):
        return sum(len(s) for s in self.sentences)


def tokenize(line, level="word", lowercase=False):
    if lowercase:
        line = line.lower()
    if level == "char":
        return list(line)
    if level == "word":
        return line.split()
    raise DataError(f"unknown tokenization level {level!r}")


def read_lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataError(f"cannot read corpus {path}: {e}") from e
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_corpus(path, vocab=None, lowercase=False, level="word", split="train"):
    """Read a one-sentence-per-line file.

    With ``vocab=None`` the vocabulary is built from the file; otherwise a
    ``Vocab`` (or a path to a saved one) is used and unseen tokens map to
    ``<unk>``.
    """
    lines = read_lines(path)
    if not lines:
        raise DataError(f"corpus {path} is empty")
    toks = [tokenize(line, level, lowercase) for line in lines]
    if vocab is None:
        vocab = Vocab.build(toks, level)
    elif not isinstance(vocab, Vocab):
        vocab = Vocab.load(vocab)
    if vocab.level != level:
        raise DataError(f"vocabulary level {vocab.level!r} does not match corpus level {level!r}")
    return Corpus([vocab.encode(t) for t in toks], vocab, split)


# ---------------------------------------------------------------------------
# synthetic data


def toy_grammar_sentence(n):
    return "a" * n + "b" * n + "c"


def toy_grammar_lines(count, rng, n_max=8):
    ns = rng.integers(1, n_max + 1, size=count)
    return [toy_grammar_sentence(int(n)) for n in ns]


def is_toy_grammar(text):
    """True for strings a^n b^n c with n >= 1."""
    if not text.endswith("c"):
        return False
    body = text[:-1]
    n = len(body) // 2
    return n >= 1 and len(body) == 2 * n and body == "a" * n + "b" * n


def write_lines(path, lines):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def linear_gaussian_data(n, p, d, rng, W=None, sigma2=1.0):
    """(x, z, W) with z ~ N(0, I) and x ~ N(Wz, sigma2 I)."""
    from .model import LinearGaussianSpec

    W = rng.standard_normal((p, d)) if W is None else np.asarray(W, dtype=np.float64)
    spec = LinearGaussianSpec(W, sigma2)
    x, z = spec.sample(n, rng)
    return x, z, spec


def save_vectors(path, x):
    np.savetxt(path, np.atleast_2d(x), delimiter=",", fmt="%.17g")


def load_vectors(path):
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            x = np.loadtxt(path, delimiter=",", ndmin=2, comments="#")
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read vectors from {path}: {e}") from e
    if x.size == 0:
        raise DataError(f"{path} holds no vectors")
    return x
