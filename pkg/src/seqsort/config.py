"""Sectioned ``key = value`` run configuration.

Sections map onto the package's config dataclasses::

    [scene]    SceneConfig        [mining]  MiningConfig
    [model]    ModelConfig        [train]   TrainConfig
    [eval]     TransferConfig     [data]    clip and tuple counts

Every key has the dataclass default, unknown sections and keys are errors,
and :func:`dump_config` writes the fully resolved configuration back out in
the same format. ``[model] preset = tiny|small`` sets the layer widths
before any explicit width keys are applied.
"""

from __future__ import annotations

import configparser
import typing
from dataclasses import fields, replace
from pathlib import Path

from .evaluator import PipelineConfig, TransferConfig
from .mining import MiningConfig
from .model import MODEL_PRESETS, ModelConfig
from .synth import TRAJECTORY_KINDS, SceneConfig
from .trainer import TrainConfig

SECTIONS: dict[str, type] = {
    "scene": SceneConfig,
    "mining": MiningConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval": TransferConfig,
}
PIPELINE_ATTR = {"scene": "scene", "mining": "mining", "model": "model", "train": "train", "eval": "transfer"}
DATA_KEYS = ("train_clips", "heldout_clips", "max_tuples", "shortcut_hue")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending ``section.key``."""


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _parse_value(key: str, raw: str, typ, default):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return low in _TRUE
        if typing.get_origin(typ) is tuple:
            if key == "scene.kind_weights":
                return _parse_kind_weights(raw)
            elem = typing.get_args(typ)[0]
            return tuple(elem(s) for s in raw.replace(",", " ").split())
        return typ(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: {e}") from e


def _parse_kind_weights(raw: str) -> tuple[float, ...]:
    """Either one weight per kind, or ``kind:weight`` pairs (unlisted kinds get 0)."""
    items = raw.replace(",", " ").split()
    if not any(":" in s for s in items):
        if len(items) != len(TRAJECTORY_KINDS):
            raise ConfigError(f"scene.kind_weights: need {len(TRAJECTORY_KINDS)} weights, got {len(items)}")
        return tuple(float(s) for s in items)
    weights = dict.fromkeys(TRAJECTORY_KINDS, 0.0)
    for item in items:
        kind, _, w = item.partition(":")
        if kind not in weights:
            raise ConfigError(f"scene.kind_weights: unknown trajectory kind {kind!r} "
                              f"(expected one of {', '.join(TRAJECTORY_KINDS)})")
        weights[kind] = float(w)
    return tuple(weights.values())


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v).lower() if isinstance(v, bool) else str(v)


def _apply(obj, section: str, items: dict[str, str]):
    types = _field_types(type(obj))
    kw = {}
    if section == "model" and "preset" in items:
        items = dict(items)
        name = items.pop("preset").strip()
        if name not in MODEL_PRESETS:
            raise ConfigError(f"model.preset: unknown preset {name!r} (known: {', '.join(MODEL_PRESETS)})")
        kw.update(MODEL_PRESETS[name])
    for key, raw in items.items():
        if key not in types:
            raise ConfigError(f"{section}.{key}: unknown key (known: {', '.join(types)})")
        kw[key] = _parse_value(f"{section}.{key}", raw, types[key], getattr(obj, key))
    return replace(obj, **kw)


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse configuration text on top of ``base`` (defaults if omitted)."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    cfg = base or PipelineConfig()
    for section in cp.sections():
        items = dict(cp.items(section))
        if section == "data":
            unknown = set(items) - set(DATA_KEYS)
            if unknown:
                raise ConfigError(f"data.{sorted(unknown)[0]}: unknown key (known: {', '.join(DATA_KEYS)})")
            types = _field_types(PipelineConfig)
            cfg = replace(cfg, **{k: _parse_value(f"data.{k}", v, types[k], None) for k, v in items.items()})
        elif section in SECTIONS:
            attr = PIPELINE_ATTR[section]
            cfg = replace(cfg, **{attr: _apply(getattr(cfg, attr), section, items)})
        else:
            raise ConfigError(f"{section}: unknown section (known: {', '.join([*SECTIONS, 'data'])})")
    validate_config(cfg)
    return cfg


def validate_config(cfg: PipelineConfig) -> None:
    """Run every block's own validation, re-raised as :class:`ConfigError`."""
    for section, attr in PIPELINE_ATTR.items():
        try:
            getattr(cfg, attr).validate()
        except ValueError as e:
            raise ConfigError(f"[{section}] {e}") from e
    for k in ("train_clips", "heldout_clips", "max_tuples"):
        if getattr(cfg, k) < 1:
            raise ConfigError(f"data.{k}: must be >= 1")
    if cfg.shortcut_hue < 0:
        raise ConfigError("data.shortcut_hue: must be >= 0")


def load_config(path: str | Path | None) -> PipelineConfig:
    if path is None:
        return parse_config("")
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def dump_config(cfg: PipelineConfig) -> str:
    """Fully resolved config text; ``parse_config(dump_config(c)) == c``."""
    out = []
    for section, attr in PIPELINE_ATTR.items():
        obj = getattr(cfg, attr)
        out.append(f"[{section}]")
        out.extend(f"{f.name} = {_format_value(getattr(obj, f.name))}" for f in fields(obj))
        out.append("")
    out.append("[data]")
    out.extend(f"{k} = {_format_value(getattr(cfg, k))}" for k in DATA_KEYS)
    return "\n".join(out) + "\n"


def write_resolved(cfg: PipelineConfig, out_dir: str | Path) -> Path:
    path = Path(out_dir) / "config.resolved.ini"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path


def describe_defaults() -> str:
    """Default configuration, used in ``--help`` epilogs and the README."""
    return dump_config(PipelineConfig())


__all__ = [
    "ConfigError", "parse_config", "load_config", "dump_config", "write_resolved", "validate_config",
    "describe_defaults", "SECTIONS", "DATA_KEYS",
]
