"""Experiment configuration: JSON presets, schema validation, hashing."""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import jsonschema

from .data import PhantomConfig

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "load_schema", "preset",
           "PRESETS", "deep_merge"]

PRESETS = ("desk", "full")
OUT_ENV = "TENVOO_OUT"


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=None)
def load_schema(name: str = "config") -> dict:
    text = resources.files("tenvoo").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def _read_json(name: str) -> dict:
    return json.loads(resources.files("tenvoo").joinpath(f"configs/{name}.json").read_text())


def deep_merge(base: Mapping, update: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in update.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _validate(raw: Mapping, where: str) -> None:
    validator = jsonschema.Draft202012Validator(load_schema("config"))
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            loc = ".".join(str(p) for p in e.absolute_path) or "<root>"
            lines.append(f"  {loc}: {e.message}")
        raise ConfigError(f"invalid config ({where}):\n" + "\n".join(lines))


def preset(name: str = "desk") -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    base = _read_json("desk")
    return base if name == "desk" else deep_merge(base, _read_json(name))


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def model(self) -> dict:
        return self.raw["model"]

    @property
    def diffusion(self) -> dict:
        return self.raw["diffusion"]

    @property
    def adapter(self) -> dict:
        return self.raw["adapter"]

    @property
    def training(self) -> dict:
        return self.raw["training"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def out_dir(self) -> Path:
        return Path(self.raw["out_dir"])

    def phantom(self, tag: str) -> PhantomConfig:
        p = dict(self.data["phantom"])
        if tag != "lesion":
            p["lesion_count"] = 0
        return PhantomConfig(grid=tuple(self.data["grid"]), tag=tag, **p)

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, indent=2)

    def hash(self) -> str:
        """SHA-256 of the canonical config, ignoring the output directory."""
        body = {k: v for k, v in self.raw.items() if k != "out_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def with_updates(self, **sections: Any) -> "ExperimentConfig":
        return load_config(overrides=deep_merge(self.raw, sections), base=None, env=False)


def _semantic_checks(raw: dict) -> None:
    d = raw["diffusion"]
    if d["beta_start"] > d["beta_end"]:
        raise ConfigError(f"diffusion.beta_start ({d['beta_start']}) must be <= beta_end ({d['beta_end']})")
    lo, hi = raw["data"]["phantom"]["lesion_radius"]
    if lo > hi:
        raise ConfigError(f"data.phantom.lesion_radius must be [lo, hi] with lo <= hi, got {[lo, hi]}")
    tags = raw["data"]["tags"]
    for key in ("pretrain_tag", "finetune_tag"):
        if raw["data"][key] not in tags:
            raise ConfigError(f"data.{key} {raw['data'][key]!r} is not listed in data.tags {tags}")


def load_config(path=None, overrides: Mapping | None = None, base: str | None = "desk",
                env: bool = True) -> ExperimentConfig:
    """Validate a user config and layer it over a preset.

    Unknown keys and out-of-range values raise :class:`ConfigError`.
    ``TENVOO_OUT`` overrides ``out_dir`` when ``env`` is set.
    """
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        _validate(user, str(path))
    if overrides:
        _validate(overrides, "overrides")
        user = deep_merge(user, overrides)
    raw = deep_merge(preset(base), user) if base else user
    _validate(raw, "resolved")
    missing = [k for k in load_schema("config")["properties"] if k not in raw]
    if missing:
        raise ConfigError(f"config is missing sections {missing}")
    if env and os.environ.get(OUT_ENV):
        raw["out_dir"] = os.environ[OUT_ENV]
    _semantic_checks(raw)
    return ExperimentConfig(raw)
