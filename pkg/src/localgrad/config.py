"""Flat TOML run configuration with strict validation.

Precedence: built-in defaults, then the config file, then command-line
overrides. Unknown keys are rejected. ``resolve`` produces the fully
expanded configuration that gets written next to every run's outputs;
re-running from that file reproduces the run bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .network import LayerSpec


class ConfigError(ValueError):
    """Invalid or unknown configuration; carries the offending field name."""


@dataclass
class RunConfig:
    mode: str = "man"
    arch: list = field(default_factory=lambda: ["linear:128", "relu"] * 8)
    k: int = 4
    classes: int = 2
    dataset: str = "spirals"
    n_per_class: int = 1000
    noise: float = 0.2
    turns: float = 2.25
    radius: float = 3.0
    separation: float = 6.0
    csv_path: str = ""
    idx_images: str = ""
    idx_labels: str = ""
    standardize: bool = True
    epochs: int = 200
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "cosine"
    man_momentum: float = 0.995
    aux_lr: float = 0.0          # 0 means "use lr"
    use_ema: bool = True
    use_bias: bool = True
    raw_copy: bool = False
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/out"
    version: str = __version__


_BOOL_KEYS = {"standardize", "use_ema", "use_bias", "raw_copy"}
_INT_KEYS = {"k", "classes", "n_per_class", "epochs", "batch_size"}
_FLOAT_KEYS = {"noise", "turns", "radius", "separation", "lr", "momentum",
               "weight_decay", "man_momentum", "aux_lr"}
_STR_KEYS = {"mode", "dataset", "csv_path", "idx_images", "idx_labels",
             "lr_schedule", "out_dir", "version"}
_LIST_KEYS = {"arch", "seeds"}
KNOWN_KEYS = _BOOL_KEYS | _INT_KEYS | _FLOAT_KEYS | _STR_KEYS | _LIST_KEYS


def _coerce(key: str, value):
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if key in _INT_KEYS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if key in _FLOAT_KEYS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if key == "seeds":
        if (not isinstance(value, list) or not value
                or any(isinstance(v, bool) or not isinstance(v, int) for v in value)):
            raise ConfigError(f"seeds: expected a non-empty list of integers, got {value!r}")
        return list(value)
    if key == "arch":
        if not isinstance(value, list) or not value \
                or any(not isinstance(v, str) for v in value):
            raise ConfigError(f"arch: expected a non-empty list of layer strings, got {value!r}")
        return list(value)
    raise ConfigError(f"unknown key {key!r}")


def parse_layer_string(text: str) -> LayerSpec:
    """``linear:OUT``, ``conv:OUT:KERNEL[:same|:PAD]``, ``relu``, ``pool``,
    ``flatten``."""
    parts = text.strip().split(":")
    kind = parts[0]
    try:
        if kind == "linear":
            (out,) = parts[1:]
            return LayerSpec("linear", (int(out),))
        if kind == "conv":
            out, kernel = parts[1], parts[2]
            padding: object = 0
            if len(parts) > 3:
                padding = "same" if parts[3] == "same" else int(parts[3])
            return LayerSpec("conv2d", (int(out), int(kernel)), padding=padding)
        if kind == "relu" and len(parts) == 1:
            return LayerSpec("relu")
        if kind == "pool" and len(parts) == 1:
            return LayerSpec("avgpool_global")
        if kind == "flatten" and len(parts) == 1:
            return LayerSpec("flatten")
    except (ValueError, IndexError) as exc:
        raise ConfigError(f"arch: cannot parse layer {text!r}: {exc}") from exc
    raise ConfigError(f"arch: cannot parse layer {text!r}")


def resolve(file_values: Optional[dict] = None,
            overrides: Optional[dict] = None) -> RunConfig:
    """Merge defaults, file values, and overrides into a validated config."""
    merged = {}
    for source in (file_values or {}), (overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = _coerce(key, value)
    cfg = RunConfig(**merged)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.mode not in ("e2e", "local", "man"):
        raise ConfigError(f"mode: expected e2e, local or man, got {cfg.mode!r}")
    if cfg.dataset not in ("spirals", "blobs", "csv", "idx"):
        raise ConfigError(
            f"dataset: expected spirals, blobs, csv or idx, got {cfg.dataset!r}")
    if cfg.dataset == "csv" and not cfg.csv_path:
        raise ConfigError("csv_path: required when dataset = 'csv'")
    if cfg.dataset == "idx" and not (cfg.idx_images and cfg.idx_labels):
        raise ConfigError("idx_images/idx_labels: required when dataset = 'idx'")
    if cfg.k < 1:
        raise ConfigError(f"k: must be >= 1, got {cfg.k}")
    if cfg.classes < 2:
        raise ConfigError(f"classes: must be >= 2, got {cfg.classes}")
    if cfg.epochs < 0:
        raise ConfigError(f"epochs: must be >= 0, got {cfg.epochs}")
    if cfg.batch_size < 1:
        raise ConfigError(f"batch_size: must be >= 1, got {cfg.batch_size}")
    if cfg.lr <= 0:
        raise ConfigError(f"lr: must be positive, got {cfg.lr}")
    if cfg.aux_lr < 0:
        raise ConfigError(f"aux_lr: must be >= 0, got {cfg.aux_lr}")
    if not 0 <= cfg.momentum < 1:
        raise ConfigError(f"momentum: must be in [0, 1), got {cfg.momentum}")
    if not 0 <= cfg.man_momentum <= 1:
        raise ConfigError(
            f"man_momentum: must be in [0, 1], got {cfg.man_momentum}")
    if cfg.weight_decay < 0:
        raise ConfigError(f"weight_decay: must be >= 0, got {cfg.weight_decay}")
    if cfg.lr_schedule not in ("constant", "cosine"):
        raise ConfigError(
            f"lr_schedule: expected constant or cosine, got {cfg.lr_schedule!r}")
    for layer in cfg.arch:
        parse_layer_string(layer)


def load_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            values = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    for key, value in values.items():
        if isinstance(value, dict):
            raise ConfigError(
                f"{key}: nested tables are not allowed; the config is flat")
    return values


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if any(c in text for c in ".eE") else text + ".0"
    if isinstance(value, str):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"')
        return f'"{escaped}"'
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {value!r}")


def write_resolved(cfg: RunConfig, path) -> None:
    """Emit the fully-resolved flat TOML document."""
    lines = []
    for f in fields(RunConfig):
        lines.append(f"{f.name} = {_toml_value(getattr(cfg, f.name))}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
