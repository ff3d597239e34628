"""YAML experiment config -> validated AppConfig.

Example::

    output_dir: runs
    datasets:
      gab: {path: data/gab.jsonl, format: jsonl, platform: gab}
    encoders: {hsd_encoder: detector-default, fe_encoder: feature-default, max_tokens: 512}
    extraction: {client: live, model_id: gpt-3.5-turbo-0613, cache_dir: cache}
    train: {learning_rate: 2.0e-5, batch_size: 16, epochs: 3, seed: 13}
    split: {ratios: [0.8, 0.1, 0.1], seed: 13}

Relative paths resolve against the config file's directory. Secrets come from
the environment (``SHIELD_LLM_API_KEY``) and override anything in the file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .datasets import FORMATS, PLATFORMS
from .errors import ConfigError
from .extraction import DEFAULT_PROMPT_VERSION, PROMPT_TEMPLATES
from .fusion import TrainConfig
from .llm import API_KEY_ENV, DEFAULT_MAX_RETRIES, DEFAULT_TEMPERATURE, DEFAULT_TOP_P

CLIENT_KINDS = ("live", "replay", "lexicon")


@dataclass
class DatasetConfig:
    name: str
    path: Path
    format: str = "jsonl"
    platform: str = "other"
    label_map: dict[str, int | None] | None = None
    id_field: str = "id"
    text_field: str = "text"
    label_field: str = "label"
    exemplar: tuple[str, int] | None = None


@dataclass
class ExtractionConfig:
    client: str = "live"
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model_id: str = "gpt-3.5-turbo-0613"
    api_key: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = DEFAULT_TOP_P
    timeout: float = 30.0
    max_retries: int = DEFAULT_MAX_RETRIES
    max_output_tokens: int | None = None
    parallelism: int = 4
    rate_limit: float | None = None
    cache_dir: Path = Path("cache")
    prompt_version: str = DEFAULT_PROMPT_VERSION
    replay_path: Path | None = None
    lexicon_path: Path | None = None
    lexicon: dict[str, str] | None = None


@dataclass
class SplitConfig:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 13


@dataclass
class BaselineConfig:
    strict: bool = False
    prompt_version: str = "v1"
    split: str = "test"


@dataclass
class AppConfig:
    datasets: dict[str, DatasetConfig]
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    output_dir: Path = Path("runs")
    embedding_cache: Path | None = None


_TOP_KEYS = {"datasets", "extraction", "encoders", "train", "split", "baseline", "output_dir", "embedding_cache"}


def _section(raw: Mapping, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, Mapping):
        raise ConfigError(key, "must be a mapping")
    return dict(value)


def _build(cls, values: dict, prefix: str, skip=()):
    allowed = {f.name for f in fields(cls)} - set(skip)
    for key in values:
        if key not in allowed:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix, str(exc)) from exc


def _resolve(base: Path, value, key: str, must_exist: bool = True) -> Path:
    if value in (None, ""):
        raise ConfigError(key, "path is required")
    path = Path(os.path.expanduser(str(value)))
    if not path.is_absolute():
        path = base / path
    if must_exist and not path.exists():
        raise ConfigError(key, f"{path} does not exist")
    return path


def _number(value, key, kind=float):
    try:
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {value!r}") from None


def load_config(path, env: Mapping[str, str] | None = None) -> AppConfig:
    env = os.environ if env is None else env
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError("config", f"{path} not found") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"invalid YAML: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError("config", "top level must be a mapping")
    return config_from_dict(raw, base=path.parent, env=env)


def config_from_dict(raw: Mapping[str, Any], base: Path = Path("."), env: Mapping[str, str] | None = None) -> AppConfig:
    env = os.environ if env is None else env
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(key, "unknown key")

    datasets_raw = _section(raw, "datasets")
    if not datasets_raw:
        raise ConfigError("datasets", "at least one dataset is required")
    datasets = {}
    for name, d in datasets_raw.items():
        prefix = f"datasets.{name}"
        if not isinstance(d, Mapping):
            raise ConfigError(prefix, "must be a mapping")
        d = dict(d)
        d["path"] = _resolve(base, d.get("path"), f"{prefix}.path")
        if d.get("format", "jsonl") not in FORMATS:
            raise ConfigError(f"{prefix}.format", f"must be one of {FORMATS}")
        if d.get("platform", "other") not in PLATFORMS:
            raise ConfigError(f"{prefix}.platform", f"must be one of {PLATFORMS}")
        if d.get("exemplar") is not None:
            ex = d["exemplar"]
            if not isinstance(ex, Mapping) or not str(ex.get("text", "")).strip() or ex.get("label") not in (0, 1):
                raise ConfigError(f"{prefix}.exemplar", "needs non-empty text and label 0 or 1")
            d["exemplar"] = (str(ex["text"]), int(ex["label"]))
        datasets[name] = _build(DatasetConfig, {"name": name, **d}, prefix)

    ext = _section(raw, "extraction")
    ext.setdefault("client", "live")
    if ext["client"] not in CLIENT_KINDS:
        raise ConfigError("extraction.client", f"must be one of {CLIENT_KINDS}")
    for key in ("temperature", "top_p", "timeout"):
        if key in ext:
            ext[key] = _number(ext[key], f"extraction.{key}")
    if ext.get("prompt_version", DEFAULT_PROMPT_VERSION) not in PROMPT_TEMPLATES:
        raise ConfigError("extraction.prompt_version", f"unknown version {ext['prompt_version']!r}")
    ext["cache_dir"] = _resolve(base, ext.get("cache_dir", "cache"), "extraction.cache_dir", must_exist=False)
    if ext["client"] == "replay":
        ext["replay_path"] = _resolve(base, ext.get("replay_path"), "extraction.replay_path")
    if ext["client"] == "lexicon":
        if ext.get("lexicon_path") is not None:
            ext["lexicon_path"] = _resolve(base, ext["lexicon_path"], "extraction.lexicon_path")
        elif not ext.get("lexicon"):
            raise ConfigError("extraction.lexicon", "lexicon client needs lexicon or lexicon_path")
    if env.get(API_KEY_ENV):
        ext["api_key"] = env[API_KEY_ENV]
    extraction = _build(ExtractionConfig, ext, "extraction")

    train_values = _section(raw, "train")
    for key in ("hsd_encoder", "fe_encoder", "max_tokens"):
        if key in train_values:
            raise ConfigError(f"train.{key}", "set encoders under the 'encoders' section")
    encoders = _section(raw, "encoders")
    for key in encoders:
        if key not in ("hsd_encoder", "fe_encoder", "max_tokens"):
            raise ConfigError(f"encoders.{key}", "unknown key")
    if "learning_rate" in train_values:
        train_values["learning_rate"] = _number(train_values["learning_rate"], "train.learning_rate")
    train = _build(TrainConfig, {**train_values, **encoders}, "train")

    split_values = _section(raw, "split")
    if "ratios" in split_values:
        ratios = split_values["ratios"]
        if not isinstance(ratios, (list, tuple)) or len(ratios) != 3:
            raise ConfigError("split.ratios", "must be a list of three numbers")
        split_values["ratios"] = tuple(_number(r, "split.ratios") for r in ratios)
        if any(r <= 0 for r in split_values["ratios"]) or abs(sum(split_values["ratios"]) - 1) > 1e-9:
            raise ConfigError("split.ratios", "must be positive and sum to 1")
    split = _build(SplitConfig, split_values, "split")

    baseline = _build(BaselineConfig, _section(raw, "baseline"), "baseline")
    if baseline.split not in ("test", "all"):
        raise ConfigError("baseline.split", "must be 'test' or 'all'")

    emb = raw.get("embedding_cache")
    return AppConfig(
        datasets=datasets,
        extraction=extraction,
        train=train,
        split=split,
        baseline=baseline,
        output_dir=_resolve(base, raw.get("output_dir", "runs"), "output_dir", must_exist=False),
        embedding_cache=None if emb is None else _resolve(base, emb, "embedding_cache", must_exist=False),
    )
