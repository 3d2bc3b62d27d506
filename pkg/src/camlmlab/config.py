"""Flat ``key = value`` configuration files with [model], [train], [corpus]
and [eval] sections.

Values are typed by the matching dataclass field. Precedence for the seed is
command-line flag, then the ``CAMLMLAB_SEED`` environment variable, then the
file.
"""
from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from camlmlab.corpus import CorpusConfig
from camlmlab.errors import ConfigError
from camlmlab.evaluation import FinetuneConfig
from camlmlab.model import ModelConfig
from camlmlab.trainer import TrainConfig

SEED_ENV = "CAMLMLAB_SEED"


@dataclass
class EvalConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    ppl_proportions: tuple[float, ...] = (0.05, 0.10, 0.15, 0.20)
    ppl_eval_every: int = 100
    ppl_steps: int = 3000
    probe_train: int = 500
    probe_steps: int = 200
    finetune_steps: int = 200
    finetune_batch: int = 32
    finetune_lr: float = 5e-5
    tau: float = 0.05
    # shift each language's sentence embeddings to zero mean before retrieval and probing
    center: bool = True

    def finetune(self, seed: int = 0) -> FinetuneConfig:
        return FinetuneConfig(
            steps=self.finetune_steps, batch_size=self.finetune_batch, lr=self.finetune_lr, tau=self.tau, seed=seed
        )


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=lambda: ModelConfig(dtype="float32"))
    train: TrainConfig = field(default_factory=TrainConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS = ("model", "train", "corpus", "eval")


def _parse_value(raw: str, default: Any, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(x) for x in raw.replace(",", " ").split())
        if default is None:
            return None if raw.lower() in ("none", "") else int(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v).lower() if isinstance(v, bool) else str(v)


def _update(obj, values: dict[str, str], section: str):
    defaults = {f.name: getattr(obj, f.name) for f in fields(obj)}
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    parsed = {k: _parse_value(v, defaults[k], f"{section}.{k}") for k, v in values.items()}
    try:
        new = replace(obj, **parsed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None
    if hasattr(new, "validate"):
        try:
            new.validate()
        except ValueError as exc:
            raise ConfigError(f"[{section}]: {exc}") from None
    return new


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from None
    extra = sorted(set(parser.sections()) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")
    cfg = base or RunConfig()
    parts = {}
    for name in SECTIONS:
        obj = getattr(cfg, name)
        parts[name] = _update(obj, dict(parser[name]), name) if parser.has_section(name) else obj
    return RunConfig(**parts)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text)


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings."""
    grouped: dict[str, dict[str, str]] = {}
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        grouped.setdefault(section, {})[name] = value
    parts = {name: getattr(cfg, name) for name in SECTIONS}
    for section, values in grouped.items():
        parts[section] = _update(parts[section], values, section)
    return RunConfig(**parts)


def resolve_seed(cfg: RunConfig, flag: int | None, sections=("train",)) -> RunConfig:
    """Flag beats environment beats file."""
    seed = flag
    if seed is None and os.environ.get(SEED_ENV, "").strip():
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    if seed is None:
        return cfg
    parts = {name: getattr(cfg, name) for name in SECTIONS}
    for name in sections:
        parts[name] = replace(parts[name], seed=seed)
    return RunConfig(**parts)


def render_config(cfg: RunConfig) -> str:
    """Text form that :func:`parse_config` reads back to an equal config."""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for k, v in asdict(getattr(cfg, name)).items():
            lines.append(f"{k} = {_format_value(v)}")
        lines.append("")
    return "\n".join(lines)
