"""Flat ``key = value`` run configuration with a closed, validated schema."""

from __future__ import annotations

from pathlib import Path

from .exceptions import ConfigError
from .training import TrainConfig

# Documented key set; unknown keys are rejected before any work starts.
CONFIG_SCHEMA: dict[str, type] = {
    "backbone": str,
    "backbone_weights": str,
    "d_prime": int,
    "temperature": float,
    "top_h": int,
    "lambda": float,
    "mu": float,
    "beta": float,
    "negatives_per_anchor": int,
    "lr": float,
    "batch_size": int,
    "max_epochs": int,
    "patience": int,
    "sigma": float,
    "seed": int,
    "image_size": int,
    "k": int,
}

_VALID_BACKBONES = ("tiny", "vgg11")


def _parse_value(key: str, raw: str):
    kind = CONFIG_SCHEMA[key]
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from e


def parse_config_file(path: str | Path) -> dict:
    """Parse a flat key=value file ('#' starts a comment)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def resolve_config(
    file_values: dict | None = None, overrides: dict | None = None
) -> TrainConfig:
    """Merge config-file values with CLI overrides (overrides win) and
    validate against the schema."""
    merged: dict = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = (
                _parse_value(key, str(value)) if isinstance(value, str) else value
            )
    if merged.get("backbone") not in (None, *_VALID_BACKBONES):
        raise ConfigError(
            f"backbone must be one of {_VALID_BACKBONES}, got {merged['backbone']!r}"
        )
    if "backbone_weights" in merged and merged["backbone_weights"]:
        merged["backbone_weights"] = str(Path(merged["backbone_weights"]).resolve())
    try:
        return TrainConfig.from_dict(merged)
    except TypeError as e:
        raise ConfigError(f"invalid configuration: {e}") from e
