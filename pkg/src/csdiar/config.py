"""Run configuration documents (TOML).

A config has one table per concern::

    [mel]     MelConfig fields
    [model]   fields of the chosen model's config, plus optional ``kind``
    [train]   TrainConfig fields
    [corpus]  SynthCorpusConfig fields
    [paths]   corpus / run directories

Unknown tables or keys raise :class:`ConfigError` naming the key. ``CSD_SEED``
in the environment overrides both ``train.seed`` and ``corpus.seed``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .errors import ConfigError
from .features import MelConfig
from .models import MODELS
from .synth import SynthCorpusConfig
from .training import TrainConfig

SEED_ENV = "CSD_SEED"


@dataclass(frozen=True)
class Paths:
    corpus: str = "corpus"
    runs: str = "runs"


@dataclass
class RunConfig:
    mel: MelConfig = field(default_factory=MelConfig)
    model: dict = field(default_factory=dict)  # overrides for the model config dataclass
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: SynthCorpusConfig = field(default_factory=SynthCorpusConfig)
    paths: Paths = field(default_factory=Paths)
    source: Path | None = None

    def model_config(self, kind: str) -> dict:
        cfg_cls = MODELS[kind][1]
        known = {f.name for f in fields(cfg_cls)}
        return {k: v for k, v in self.model.items() if k in known and k != "num_classes"}

    def resolve(self, p: str) -> Path:
        path = Path(p)
        if path.is_absolute() or self.source is None:
            return path
        return self.source.parent / path


def _build(cls, table: dict, section: str):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls)}
    for key in table:
        if key not in known:
            raise ConfigError(f"unknown key '{section}.{key}'")
    try:
        return cls(**table)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def _model_keys() -> set[str]:
    keys = {"kind"}
    for _, cfg_cls in MODELS.values():
        keys |= {f.name for f in fields(cfg_cls)}
    return keys - {"num_classes"}


def parse_config(doc: dict, source: Path | None = None, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    sections = {"mel", "model", "train", "corpus", "paths"}
    for key in doc:
        if key not in sections:
            raise ConfigError(f"unknown section '{key}'")
    train = dict(doc.get("train", {}))
    corpus = dict(doc.get("corpus", {}))
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
        train["seed"] = seed
        corpus["seed"] = seed
    model = dict(doc.get("model", {}))
    allowed = _model_keys()
    for key in model:
        if key not in allowed:
            raise ConfigError(f"unknown key 'model.{key}'")
    return RunConfig(
        mel=_build(MelConfig, dict(doc.get("mel", {})), "mel"),
        model=model,
        train=_build(TrainConfig, train, "train"),
        corpus=_build(SynthCorpusConfig, corpus, "corpus"),
        paths=_build(Paths, dict(doc.get("paths", {})), "paths"),
        source=source,
    )


def load_config(path: str | Path | None, env: dict | None = None) -> RunConfig:
    """Read a TOML config; ``None`` gives all defaults (still honouring ``CSD_SEED``)."""
    if path is None:
        return parse_config({}, None, env)
    path = Path(path)
    try:
        doc = tomli.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc, path, env)
