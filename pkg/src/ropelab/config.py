"""Flat key = value experiment configuration.

The format is line oriented: `section.key = value`, comments start with #,
blank lines are ignored.  Values are kept as strings until a typed accessor
asks for them, and a parsed mapping serializes back to canonical text whose
reparse is identical (keys sorted, single spaces around =).
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .rope import (
    Ntk,
    Pi,
    Rope,
    RopeConfig,
    RotaryVariant,
    Yarn,
    default_yarn_temperature,
)
from .tasks import SyntheticTask

__all__ = [
    "ConfigError",
    "Config",
    "parse_config_text",
    "serialize_config",
    "load_config",
    "config_hash",
    "build_rotary_variant",
    "build_model_config",
    "build_task",
]

VARIANT_KINDS = ("rope", "pi", "ntk", "yarn")


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


def parse_config_text(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.split("#", 1)[0].strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def serialize_config(entries: dict[str, str]) -> str:
    return "".join(f"{key} = {entries[key]}\n" for key in sorted(entries))


def config_hash(entries: dict[str, str]) -> str:
    return hashlib.sha256(serialize_config(entries).encode()).hexdigest()


class Config:
    """Typed accessors over the raw key -> string mapping."""

    def __init__(self, entries: dict[str, str]):
        self.entries = dict(entries)

    def has(self, key: str) -> bool:
        return key in self.entries

    def _raw(self, key: str, default):
        if key in self.entries:
            return self.entries[key]
        if default is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
        return default

    def get_str(self, key: str, default=None) -> str:
        value = self._raw(key, _REQUIRED if default is None else default)
        return value if isinstance(value, str) else value

    def get_int(self, key: str, default=None) -> int:
        value = self._raw(key, _REQUIRED if default is None else default)
        if isinstance(value, int):
            return value
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected integer, got {value!r}") from exc

    def get_float(self, key: str, default=None) -> float:
        value = self._raw(key, _REQUIRED if default is None else default)
        if isinstance(value, (int, float)):
            return float(value)
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected number, got {value!r}") from exc

    def get_int_list(self, key: str, default=None) -> list[int]:
        value = self._raw(key, _REQUIRED if default is None else default)
        if not isinstance(value, str):
            return list(value)
        try:
            return [int(part.strip()) for part in value.split(",") if part.strip()]
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected integer list, got {value!r}") from exc

    def get_float_list(self, key: str, default=None) -> list[float]:
        value = self._raw(key, _REQUIRED if default is None else default)
        if not isinstance(value, str):
            return list(value)
        try:
            return [float(part.strip()) for part in value.split(",") if part.strip()]
        except ValueError as exc:
            raise ConfigError(f"key {key!r}: expected number list, got {value!r}") from exc

    def get_str_list(self, key: str, default=None) -> list[str]:
        value = self._raw(key, _REQUIRED if default is None else default)
        if not isinstance(value, str):
            return list(value)
        return [part.strip() for part in value.split(",") if part.strip()]


_REQUIRED = object()


def load_config(path) -> Config:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = Config(parse_config_text(path.read_text()))
    if not cfg.entries:
        raise ConfigError(f"config file {path} is empty")
    return cfg


def build_rotary_variant(
    cfg: Config,
    name: str,
    head_dim: int,
    train_context_length: int,
    prefix: str | None = None,
) -> RotaryVariant:
    """Variant from config keys.

    `name` selects the kind (or a named section whose `.kind` key selects
    it); parameters come from `<prefix>.<param>` with the defaults alpha=16,
    new_base=1e6, and ramp cutoffs of train_context_length/32 and
    train_context_length.
    """
    prefix = prefix if prefix is not None else f"variant.{name}"
    kind = cfg.get_str(f"{prefix}.kind", name if name in VARIANT_KINDS else None)
    if kind not in VARIANT_KINDS:
        raise ConfigError(f"unknown rotary variant kind {kind!r} for {name!r}")
    base = cfg.get_float(f"{prefix}.base", cfg.get_float("model.base", 10000.0))
    rope_config = RopeConfig(head_dim=head_dim, base=base)
    try:
        if kind == "rope":
            return Rope(rope_config)
        if kind == "pi":
            return Pi(rope_config, alpha=cfg.get_float(f"{prefix}.alpha", 16.0))
        if kind == "ntk":
            return Ntk(rope_config, new_base=cfg.get_float(f"{prefix}.new_base", 1_000_000.0))
        alpha = cfg.get_float(f"{prefix}.alpha", 16.0)
        return Yarn(
            rope_config,
            alpha=alpha,
            ramp_low=cfg.get_float(f"{prefix}.ramp_low", train_context_length / 32.0),
            ramp_high=cfg.get_float(f"{prefix}.ramp_high", float(train_context_length)),
            temperature=cfg.get_float(
                f"{prefix}.temperature", default_yarn_temperature(alpha)
            ),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid parameters for variant {name!r}: {exc}") from exc


def build_model_config(cfg: Config, seed: int | None = None) -> ModelConfig:
    train_len = cfg.get_int("model.train_context_length")
    head_dim = cfg.get_int("model.head_dim")
    variant_name = cfg.get_str("model.variant", "rope")
    # The model section carries its own variant parameters (model.alpha, ...).
    variant = build_rotary_variant(cfg, variant_name, head_dim, train_len, prefix="model")
    try:
        return ModelConfig(
            vocab_size=cfg.get_int("model.vocab_size"),
            layer_count=cfg.get_int("model.layer_count"),
            head_count=cfg.get_int("model.head_count"),
            head_dim=head_dim,
            mlp_ratio=cfg.get_int("model.mlp_ratio", 2),
            train_context_length=train_len,
            variant=variant,
            seed=cfg.get_int("model.seed", seed if seed is not None else 0),
            inference_cap=cfg.get_int("model.inference_cap", 8192),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc


def build_task(cfg: Config, vocab_size: int) -> SyntheticTask:
    try:
        return SyntheticTask(
            kind=cfg.get_str("task.kind", "kv_retrieval"),
            vocab_size=vocab_size,
            key_len=cfg.get_int("task.key_len", 1),
            value_len=cfg.get_int("task.value_len", 2),
            key_alphabet=cfg.get_int("task.key_alphabet", 8),
            value_alphabet=cfg.get_int("task.value_alphabet", 8),
            depth_policy=cfg.get_str("task.depth_policy", "uniform"),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid task config: {exc}") from exc
