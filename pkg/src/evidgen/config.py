"""Flat key=value configuration files and the artifact cache location.

Config files are plain text: one ``key = value`` per line, ``#`` starts
a comment, blank lines are ignored. Every key maps onto a dataclass
field and is type-coerced from its annotation, so the same file format
drives any of the package's config dataclasses.
"""

from __future__ import annotations

import os
import types
import typing
from dataclasses import fields, is_dataclass
from pathlib import Path
from typing import Mapping

CACHE_ENV = "EVIDGEN_CACHE"
DEFAULT_CACHE = ".evidgen_cache"

_TRUE = frozenset({"1", "true", "yes", "on"})
_FALSE = frozenset({"0", "false", "no", "off"})


class ConfigError(ValueError):
    """Malformed config file or value."""


def cache_dir() -> Path:
    """Artifact cache directory; overridable via the EVIDGEN_CACHE variable."""
    return Path(os.environ.get(CACHE_ENV) or DEFAULT_CACHE)


def parse_config_file(path) -> dict[str, str]:
    """Read a key=value file into raw string values."""
    values: dict[str, str] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _coerce(name: str, text: str, annotation) -> object:
    origin = typing.get_origin(annotation)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(annotation) if a is not type(None)]
        if len(args) != 1:
            raise ConfigError(f"{name}: unsupported union type {annotation}")
        if text.lower() in {"", "none", "null"}:
            return None
        annotation = args[0]
    try:
        if annotation is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is str:
            return text
    except ValueError as err:
        raise ConfigError(f"{name}: cannot parse {text!r} as {annotation.__name__}") from err
    raise ConfigError(f"{name}: unsupported field type {annotation}")


def dataclass_from_mapping(cls, raw: Mapping[str, str], **direct):
    """Build a config dataclass from string values plus typed overrides.

    ``raw`` entries are coerced from the field annotations; ``direct``
    entries are already-typed values (e.g. parsed CLI flags) and take
    precedence. ``direct`` values of None mean "not set".
    """
    if not is_dataclass(cls):
        raise TypeError(f"{cls!r} is not a dataclass")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs: dict[str, object] = {}
    for key, text in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(key, text, hints[key])
    for key, value in direct.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            kwargs[key] = value
    return cls(**kwargs)
