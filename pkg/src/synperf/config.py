"""key=value (de)serialization for the frozen config dataclasses."""

import dataclasses
import enum
import typing
from pathlib import Path

from .data import read_kv


def _fmt(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_scalar(text, like):
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, enum.Enum):
        return type(like)(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def _parse(text, default):
    if text == "none":
        return None
    if isinstance(default, tuple) or (default is None and "," in text):
        parts = [p for p in text.split(",") if p != ""]
        like = default if default else [None] * len(parts)
        if like and len(like) == len(parts):
            return tuple(_parse_scalar(p, d) for p, d in zip(parts, like))
        return tuple(_parse_scalar(p, like[0] if like else None) for p in parts)
    return _parse_scalar(text, default)


def to_kv(cfg, prefix=""):
    return {prefix + f.name: _fmt(getattr(cfg, f.name)) for f in dataclasses.fields(cfg)}


def from_kv(cls, items: dict, prefix="", base=None):
    """Build ``cls`` from ``items``; keys missing from ``items`` keep the defaults of ``base``."""
    base = base if base is not None else cls()
    hints = typing.get_type_hints(cls)
    changes = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key not in items:
            continue
        default = getattr(base, f.name)
        value = _parse(items[key], default)
        if default is None and isinstance(value, str) and hints.get(f.name) is bool:
            value = _parse_scalar(value, False)
        changes[f.name] = value
    return dataclasses.replace(base, **changes)


def unknown_keys(items: dict, *classes_with_prefix):
    known = set()
    for cls, prefix in classes_with_prefix:
        known |= {prefix + f.name for f in dataclasses.fields(cls)}
    return sorted(set(items) - known)


def load_config_file(path) -> dict:
    return read_kv(Path(path))
