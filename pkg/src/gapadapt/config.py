"""Flat ``key = value`` run configuration with per-key provenance.

Resolution order (later wins): built-in defaults, config file, environment
variables ``GAPADAPT_<KEY>``, command-line ``--set key=value`` pairs.
"""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .engine import AdaptationConfig, provenance

ENV_PREFIX = "GAPADAPT_"

# run-level keys that are not adaptation hyperparameters
RUN_DEFAULTS: dict[str, Any] = {
    "dataset": "synthetic",
    "num_classes": 4,
    "samples_per_class": 500,
    "synthetic_dim": 2,
    "radius": 3.0,
    "cluster_std": 1.0,
    "rotation_deg": 35.0,
    "translation": 0.0,
    "scale": 1.0,
    "source_list": "",
    "target_list": "",
    "data_root": "",
    "class_names": "",
    "backbone": "mlp",
    "hidden": 128,
    "bottleneck_dim": 64,
    "pretrain_epochs": 30,
    "pretrain_lr": 1e-2,
    "teacher": "mock",
    "teacher_omega": 0.6,
    "teacher_embed_dim": 32,
    "teacher_path": "",
    "hc_quantile": 0.3,
}


class ConfigError(ValueError):
    pass


def _adapt_defaults() -> dict[str, Any]:
    return {f.name: f.default for f in fields(AdaptationConfig)}


def all_defaults() -> dict[str, Any]:
    return {**RUN_DEFAULTS, **_adapt_defaults()}


def _coerce(key: str, raw: str, default: Any) -> Any:
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    """Fully resolved configuration; ``values`` is total over every known key."""

    def __init__(self, values: dict[str, Any], origin: dict[str, str]):
        self.values = values
        self.origin = origin

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @classmethod
    def resolve(
        cls,
        path: Optional[Path] = None,
        overrides: Optional[Mapping[str, str]] = None,
        environ: Optional[Mapping[str, str]] = None,
    ) -> "RunConfig":
        defaults = all_defaults()
        values = dict(defaults)
        origin = {k: provenance(k) if k in _adapt_defaults() else "derived-default" for k in defaults}
        layers = []
        if path is not None:
            path = Path(path)
            if not path.is_file():
                raise ConfigError(f"config file {path} not found")
            layers.append(("file", parse_config_text(path.read_text(), str(path))))
        env = os.environ if environ is None else environ
        env_layer = {
            k[len(ENV_PREFIX) :].lower(): v
            for k, v in env.items()
            if k.startswith(ENV_PREFIX) and k[len(ENV_PREFIX) :].lower() in defaults
        }
        layers.append(("env", env_layer))
        layers.append(("cli", dict(overrides or {})))
        unknown = sorted({k for _, layer in layers for k in layer if k not in defaults})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for tag, layer in layers:
            for k, raw in layer.items():
                values[k] = _coerce(k, raw, defaults[k])
                origin[k] = f"user:{tag}"
        try:
            cls.adaptation_of(values)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(values, origin)

    @staticmethod
    def adaptation_of(values: Mapping[str, Any]) -> AdaptationConfig:
        return AdaptationConfig(**{k: values[k] for k in _adapt_defaults()})

    @property
    def adaptation(self) -> AdaptationConfig:
        return self.adaptation_of(self.values)

    def provenance_table(self) -> dict[str, dict[str, Any]]:
        return {k: {"value": self.values[k], "source": self.origin[k]} for k in sorted(self.values)}

    def dump(self) -> str:
        return "".join(f"{k} = {self.values[k]}\n" for k in sorted(self.values))
