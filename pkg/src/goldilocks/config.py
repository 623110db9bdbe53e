"""Experiment configuration files.

Config files are TOML with a top-level ``config_version`` and one section
per component (see ``configs/reference.toml`` for the annotated reference).
Every key must match a known field; unknown keys are rejected by exact
name. Values can be overridden from the command line with
``--set section.key=value`` and all four seed streams can be rebased at
once with ``--seed N``.
"""

from __future__ import annotations

import sys
from dataclasses import fields
from fractions import Fraction

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from goldilocks.grpo import LossConfig, RewardConfig
from goldilocks.harness import (
    DatasetSettings,
    ExperimentConfig,
    ProtocolSettings,
    SeedSettings,
    StudentSettings,
)
from goldilocks.teacher import TeacherConfig

CONFIG_VERSION = 1

SECTION_TYPES = {
    "dataset": DatasetSettings,
    "student": StudentSettings,
    "teacher": TeacherConfig,
    "loss": LossConfig,
    "reward": RewardConfig,
    "seeds": SeedSettings,
    "protocol": ProtocolSettings,
}

RUN_KEYS = ("group_size", "batch_size", "total_steps", "compute_ratio",
            "eval_every", "validation_size")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


def _coerce(section: str, key: str, value, target_type) -> object:
    try:
        if target_type is Fraction:
            if isinstance(value, str):
                return Fraction(value)
            return Fraction(value)
        if target_type is float:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if target_type is int:
            if isinstance(value, bool) or (isinstance(value, float)
                                           and not value.is_integer()):
                raise TypeError
            return int(value)
        if target_type is str:
            if not isinstance(value, str):
                raise TypeError
            return value
        return value
    except (TypeError, ValueError):
        raise ConfigError(
            f"config key [{section}].{key} expects {target_type.__name__}, "
            f"got {value!r}"
        ) from None


def _build_section(section: str, data: dict, cls):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: [{section}].{key}")
        default = known[key].default
        target_type = type(default) if default is not None else type(value)
        kwargs[key] = _coerce(section, key, value, target_type)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"invalid value in [{section}]: {exc}") from exc


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    version = raw.pop("config_version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(
            f"config_version must be {CONFIG_VERSION}, got {version!r}"
        )
    kwargs = {}
    run = raw.pop("run", {})
    if not isinstance(run, dict):
        raise ConfigError("[run] must be a table")
    run_defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    for key, value in run.items():
        if key not in RUN_KEYS:
            raise ConfigError(f"unknown config key: [run].{key}")
        target = Fraction if key == "compute_ratio" else type(run_defaults[key])
        kwargs[key] = _coerce("run", key, value, target)
    for section, data in raw.items():
        if section not in SECTION_TYPES:
            raise ConfigError(f"unknown config section: [{section}]")
        if not isinstance(data, dict):
            raise ConfigError(f"[{section}] must be a table")
        kwargs[section] = _build_section(section, data, SECTION_TYPES[section])
    try:
        return ExperimentConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_raw(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a raw config dict."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, value = item.split("=", 1)
        parts = dotted.split(".")
        if len(parts) == 2 and (parts[0] in SECTION_TYPES or parts[0] == "run"):
            section, key = parts
        else:
            raise ConfigError(f"override target {dotted!r} must be section.key")
        raw.setdefault(section, {})
        raw[section][key] = _parse_literal(value)
    return raw


def _parse_literal(text: str):
    lowered = text.strip()
    if lowered in ("true", "false"):
        return lowered == "true"
    for caster in (int, float):
        try:
            return caster(lowered)
        except ValueError:
            continue
    return lowered


def load_config(path, overrides: list[str] | None = None,
                seed: int | None = None) -> ExperimentConfig:
    raw = load_raw(path)
    if overrides:
        apply_overrides(raw, overrides)
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed must be >= 0")
        base = SeedSettings.from_base(seed)
        raw["seeds"] = {"dataset": base.dataset, "student": base.student,
                        "teacher": base.teacher, "selection": base.selection}
    return config_from_dict(raw)
