"""Flat ``key = value`` run configuration.

Keys are the field names of :class:`ModelConfig` and :class:`TrainConfig`,
plus three conveniences: ``preset`` (``full`` or ``desk``, applied before
anything else), ``dim`` (sets both branch widths) and ``train_seed`` (the
training stream seed; ``seed`` is the model-initialisation seed).
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

from .model import DESK_CONFIG, FULL_CONFIG, ConfigError, ModelConfig
from .train import TrainConfig

PRESETS = {
    "full": (FULL_CONFIG, TrainConfig()),
    "desk": (DESK_CONFIG, TrainConfig(epochs=20)),
}

_MODEL_KEYS = {f.name: f for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig) if f.name != "seed"}
_OPTIONAL = {"checkpoint_path", "log_path"}


def _convert(key: str, raw: str, default, lineno: int):
    try:
        if key in _OPTIONAL:
            return None if raw.lower() in ("", "none") else raw
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: cannot parse value {raw!r} for {key}") from None


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig]:
    pairs = []
    preset = "full"
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {body!r}")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key == "preset":
            if raw not in PRESETS:
                raise ConfigError(f"line {lineno}: unknown preset {raw!r} (choose from {sorted(PRESETS)})")
            preset = raw
            continue
        pairs.append((lineno, key, raw))

    model, train = PRESETS[preset]
    model_updates, train_updates = {}, {}
    for lineno, key, raw in pairs:
        if key == "dim":
            value = _convert(key, raw, 0, lineno)
            model_updates["dim_s"] = model_updates["dim_l"] = value
        elif key == "train_seed":
            train_updates["seed"] = _convert(key, raw, 0, lineno)
        elif key in _MODEL_KEYS:
            model_updates[key] = _convert(key, raw, getattr(model, key), lineno)
        elif key in _TRAIN_KEYS:
            train_updates[key] = _convert(key, raw, getattr(train, key), lineno)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    model = replace(model, **model_updates).validate(buildable=False)
    train = replace(train, **train_updates).validate()
    return model, train


def parse_config(path) -> tuple[ModelConfig, TrainConfig]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def format_config(model: ModelConfig, train: TrainConfig) -> str:
    """Every effective value, one ``key = value`` line each; parses back to the same configs."""
    lines = ["# model"]
    for name in _MODEL_KEYS:
        lines.append(f"{name} = {getattr(model, name)}")
    lines.append("# training")
    for name in _TRAIN_KEYS:
        value = getattr(train, name)
        lines.append(f"{name} = {'none' if value is None else value}")
    lines.append(f"train_seed = {train.seed}")
    return "\n".join(lines) + "\n"
