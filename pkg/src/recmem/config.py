"""TOML run configuration.

Example::

    dataset_dir = "data/ml-1m"
    output_dir = "out"
    seed = 42

    [decoding]
    temperature = 0.0
    max_tokens = 256

    [campaign]
    shots = 2
    workers = 4

    [endpoints.gpt-4o]
    backend = "http"
    base_url = "https://api.openai.com/v1"
    auth_token_env = "OPENAI_API_KEY"
    cache = "cache/gpt-4o.jsonl"

    [baselines.bprmf]
    epochs = 30
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"dataset_dir", "output_dir", "seed", "decoding", "campaign", "endpoints", "baselines"}
_CAMPAIGN_KEYS = {"shots", "workers", "limit", "partial", "sliding", "sample_users", "ratio", "fraction"}
_ENDPOINT_KEYS = {"model_name", "backend", "base_url", "auth_token_env", "cache", "timeout", "fraction"}


@dataclass
class RunConfig:
    dataset_dir: Path | None = None
    output_dir: Path = Path("out")
    seed: int = 42
    decoding: dict = field(default_factory=dict)
    campaign: dict = field(default_factory=dict)
    endpoints: dict[str, dict] = field(default_factory=dict)
    baselines: dict[str, dict] = field(default_factory=dict)
    source: Path | None = None

    def require_dataset(self) -> Path:
        if self.dataset_dir is None:
            raise ConfigError("no dataset directory (set dataset_dir or pass --dataset-dir)")
        path = Path(self.dataset_dir)
        if not path.is_dir():
            raise ConfigError(f"dataset directory {path} does not exist")
        return path


def _table(obj, name: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"[{name}] must be a table")
    return obj


def parse_config(text: str, source: Path | None = None) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source or 'config'}: {exc}") from None
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    base = source.parent if source is not None else Path(".")

    def path_of(value):
        p = Path(value)
        return p if p.is_absolute() else base / p

    cfg = RunConfig(source=source)
    if "dataset_dir" in raw:
        cfg.dataset_dir = path_of(raw["dataset_dir"])
    if "output_dir" in raw:
        cfg.output_dir = path_of(raw["output_dir"])
    if "seed" in raw:
        if not isinstance(raw["seed"], int):
            raise ConfigError("seed must be an integer")
        cfg.seed = raw["seed"]
    cfg.decoding = dict(_table(raw.get("decoding", {}), "decoding"))
    cfg.campaign = dict(_table(raw.get("campaign", {}), "campaign"))
    bad = set(cfg.campaign) - _CAMPAIGN_KEYS
    if bad:
        raise ConfigError(f"unknown [campaign] keys: {sorted(bad)}")
    for name, ep in _table(raw.get("endpoints", {}), "endpoints").items():
        ep = dict(_table(ep, f"endpoints.{name}"))
        bad = set(ep) - _ENDPOINT_KEYS
        if bad:
            raise ConfigError(f"unknown [endpoints.{name}] keys: {sorted(bad)}")
        if "cache" in ep:
            ep["cache"] = path_of(ep["cache"])
        cfg.endpoints[name] = ep
    for name, hp in _table(raw.get("baselines", {}), "baselines").items():
        cfg.baselines[name] = dict(_table(hp, f"baselines.{name}"))
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, path)
