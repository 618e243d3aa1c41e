"""Run configuration from flat ``section.key = value`` files.

Example file::

    # toy grammar, small decoder
    model.d = 8
    model.hidden = 32
    sri.s = 0.1
    train.iterations = 1000

Unknown sections or keys are errors.  Later assignments (including command
line overrides) win over earlier ones.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .sri import DEFAULT_GRID, SriConfig
from .training import TrainConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ModelSection:
    decoder: str = "lstm"
    d: int = 32
    hidden: int = 128
    embed: int = 64
    latent: bool = True
    init_scale: float = 0.08
    latent_init_scale: float = 0.08


@dataclass(frozen=True)
class SriSection:
    K: int = 20
    s: float = 0.1
    grid: tuple = DEFAULT_GRID
    grid_samples: int = 4
    step_interval: int = 500
    noise: bool = True
    divergence_threshold: float = 1e3


@dataclass(frozen=True)
class TrainSection:
    iterations: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    lr_decay: float = 0.0
    optimizer: str = "sgd"
    clip: float = 5.0
    samples: int = 1
    seed: int = 0
    checkpoint_every: int = 0


@dataclass(frozen=True)
class EvalSection:
    M: int = 512
    samples: int = 200
    au_threshold: float = 1e-2
    chunk_chains: int = 1024
    max_len: int = 50
    interpolation_steps: int = 6


@dataclass(frozen=True)
class DataSection:
    level: str = "char"
    lowercase: bool = False


@dataclass(frozen=True)
class PathsSection:
    corpus: str = ""
    vocab: str = ""
    runs: str = "runs"


@dataclass(frozen=True)
class RunSection:
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)


SECTIONS = {
    "model": ModelSection,
    "sri": SriSection,
    "train": TrainSection,
    "eval": EvalSection,
    "data": DataSection,
    "paths": PathsSection,
    "run": RunSection,
}

# excluded from the config hash: they never change numbers
NON_NUMERIC = {("paths", "corpus"), ("paths", "vocab"), ("paths", "runs"), ("run", "threads"),
               ("train", "seed"), ("train", "checkpoint_every")}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    sri: SriSection = field(default_factory=SriSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self):
        m, s, t, e = self.model, self.sri, self.train, self.eval
        checks = [
            (m.decoder in ("lstm", "linear_gaussian"), f"unknown decoder {m.decoder!r}"),
            (m.d >= 1, "model.d must be >= 1"),
            (m.hidden >= 1 and m.embed >= 1, "model sizes must be >= 1"),
            (s.K >= 1, "sri.K must be >= 1"),
            (s.s > 0, "sri.s must be positive"),
            (s.step_interval >= 1, "sri.step_interval must be >= 1"),
            (s.grid_samples >= 1, "sri.grid_samples must be >= 1"),
            (len(s.grid) > 0 and all(v > 0 for v in s.grid), "sri.grid must be positive"),
            (all(b > a for a, b in zip(s.grid, s.grid[1:])), "sri.grid must be strictly increasing"),
            (t.iterations >= 0 and t.batch_size >= 1, "train sizes out of range"),
            (t.lr > 0, "train.lr must be positive"),
            (t.optimizer in ("sgd", "adam"), f"unknown optimizer {t.optimizer!r}"),
            (e.M >= 1 and e.samples >= 1, "eval sample counts must be >= 1"),
            (e.au_threshold > 0, "eval.au_threshold must be positive"),
            (self.data.level in ("word", "char"), f"unknown level {self.data.level!r}"),
            (self.run.threads >= 1, "run.threads must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def sri_config(self, s=None):
        return SriConfig(K=self.sri.K, s=self.sri.s if s is None else s, noise=self.sri.noise,
                         divergence_threshold=self.sri.divergence_threshold)

    def train_config(self, trainable=None):
        t = self.train
        return TrainConfig(
            iterations=t.iterations,
            batch_size=t.batch_size,
            lr=t.lr,
            lr_decay=t.lr_decay,
            optimizer=t.optimizer,
            step_interval=self.sri.step_interval,
            grid=self.sri.grid,
            grid_samples=self.sri.grid_samples,
            samples=t.samples,
            clip=t.clip if self.model.decoder == "lstm" and t.clip > 0 else None,
            trainable=trainable,
            seed=t.seed,
            checkpoint_every=t.checkpoint_every,
            sri=self.sri_config(),
        )

    def to_dict(self):
        d = asdict(self)
        d["sri"]["grid"] = list(self.sri.grid)
        return d

    def numeric_dict(self):
        d = self.to_dict()
        for sec, key in NON_NUMERIC:
            d[sec].pop(key, None)
        return d

    def hash(self):
        blob = json.dumps(self.numeric_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_text(self):
        lines = []
        for sec, vals in self.to_dict().items():
            for k, v in vals.items():
                if isinstance(v, list):
                    v = ", ".join(repr(x) for x in v)
                elif isinstance(v, bool):
                    v = str(v).lower()
                lines.append(f"{sec}.{k} = {v}")
        return "\n".join(lines) + "\n"


def _convert(raw, typ, where):
    raw = raw.strip()
    try:
        if typ in (bool, "bool"):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        if typ in (tuple, "tuple"):
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError as e:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from e


def parse_assignments(lines, where="config"):
    """[(section, key, raw value)] from ``section.key = value`` lines."""
    out = []
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{where}:{n}: expected 'section.key = value'")
        lhs, rhs = text.split("=", 1)
        lhs = lhs.strip()
        if lhs.count(".") != 1:
            raise ConfigError(f"{where}:{n}: key {lhs!r} must be 'section.key'")
        sec, key = lhs.split(".")
        out.append((sec, key, rhs, f"{where}:{n}"))
    return out


def apply_assignments(cfg, assignments):
    sections = {name: getattr(cfg, name) for name in SECTIONS}
    for sec, key, raw, where in assignments:
        if sec not in SECTIONS:
            raise ConfigError(f"{where}: unknown section {sec!r}")
        types = {f.name: f.type for f in fields(SECTIONS[sec])}
        if key not in types:
            raise ConfigError(f"{where}: unknown key {sec}.{key}")
        sections[sec] = replace(sections[sec], **{key: _convert(raw, types[key], where)})
    return RunConfig(**sections)


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``key=value`` override strings."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = apply_assignments(cfg, parse_assignments(text.splitlines(), str(path)))
    if overrides:
        cfg = apply_assignments(cfg, parse_assignments(list(overrides), "override"))
    return cfg
