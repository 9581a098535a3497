"""Run configuration: ``key = value`` sections with typed defaults.

Every field has a default. A config file only needs the keys it changes;
unknown sections or keys are rejected so typos do not silently fall back
to defaults. The ``paths`` section is kept out of the reproducibility hash
because the same experiment may live in different directories.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json
from pathlib import Path

from .model import ModelConfig
from .train import TrainConfig

# model defaults sized for a mid-sized catalog; shrink d, n and heads for desk-scale runs
DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0},
    "paths": {"input": "", "data": "", "checkpoint": "", "out": "runs"},
    "data": {"min_user": 5, "min_item": 5, "rating_threshold": 4.0},
    "model": {
        "kind": "star",
        "d": 256,
        "n": 75,
        "n_heads": 16,
        "n_blocks": 3,
        "activation": "gelu",
        "use_user_embedding": True,
        "attention_scale": "d",
        "init_std": 0.02,
        "dtype": "float64",
    },
    "train": {
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "batch_size": 128,
        "max_epochs": 200,
        "patience": 10,
        "examples": "all",
        "eval_k": 10,
    },
    "eval": {"mode": "test", "ks": "10,20", "num_negatives": 0, "buckets": True, "batch_size": 256},
    "probe": {"sample_size": 1000, "block": 1, "include_diagonal": True, "mode": "test"},
    "bench": {"n_grid": "64,128,256,512", "d": 64, "n_blocks": 2, "n_heads": 2, "reps": 15, "n": 2, "kinds": "star,baseline"},
    "synth": {"users": 200, "items": 50, "steps": 30},
}


class ConfigError(ValueError):
    pass


def _coerce(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


class RunConfig:
    def __init__(self, values: dict[str, dict] | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, value in items.items():
                self.set(section, key, value)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls()
        if path:
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            except configparser.Error as exc:
                raise ConfigError(f"malformed config {path}: {exc}") from exc
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(section, key, value)
        for item in overrides or []:
            name, sep, value = item.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            cfg.set(section, key, value)
        return cfg

    def set(self, section: str, key: str, value) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _coerce(value, default, f"{section}.{key}")
        self.values[section][key] = value

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def echo(self) -> dict:
        """Effective configuration without filesystem paths."""
        return {s: dict(v) for s, v in sorted(self.values.items()) if s != "paths"}

    def digest(self) -> str:
        blob = json.dumps(self.echo(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_text(self) -> str:
        lines = []
        for section, items in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {v}" for k, v in items.items())
            lines.append("")
        return "\n".join(lines)

    # typed views

    def model_config(self, num_users: int, catalog_size: int) -> ModelConfig:
        try:
            return ModelConfig(num_users=num_users, catalog_size=catalog_size, **self.values["model"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [model] settings: {exc}") from exc

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(seed=self.values["run"]["seed"], **self.values["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [train] settings: {exc}") from exc

    def int_list(self, section: str, key: str) -> list[int]:
        raw = self.values[section][key]
        try:
            vals = [int(x) for x in str(raw).split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key} must be a comma-separated list of integers") from None
        if not vals or min(vals) < 1:
            raise ConfigError(f"{section}.{key} needs positive integers")
        return vals
