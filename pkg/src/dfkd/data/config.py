"""Flat ``key = value`` config files with ``[section]`` headers.

Values are coerced to the type of the matching dataclass field; tuples are
written comma-separated. Unknown keys are rejected so that typos surface.
"""
from __future__ import annotations

import configparser
import dataclasses
import typing
from typing import Any, Dict

from ..errors import ConfigError, FormatError


def read_config(path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise FormatError(f"{path}: {e}") from None
    return {s: dict(parser.items(s)) for s in parser.sections()}


def write_config(sections: Dict[str, Dict[str, Any]], path) -> None:
    with open(path, "w") as f:
        for name, values in sections.items():
            f.write(f"[{name}]\n")
            for k, v in values.items():
                f.write(f"{k} = {format_value(v)}\n")
            f.write("\n")


def format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(text: str, tp, key: str):
    origin = typing.get_origin(tp)
    try:
        if origin is typing.Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if text.strip().lower() in ("", "none"):
                return None
            return _coerce(text, args[0], key)
        if origin in (tuple, list):
            args = typing.get_args(tp)
            item = args[0] if args else str
            parts = [p.strip() for p in text.split(",") if p.strip()]
            return tuple(_coerce(p, item, key) for p in parts)
        if tp is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {getattr(tp, '__name__', tp)}") from None


def apply_overrides(obj, values: Dict[str, Any], section: str = ""):
    """Return a copy of dataclass ``obj`` with string or typed ``values`` applied."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in values.items():
        if key not in names:
            where = f"[{section}] " if section else ""
            raise ConfigError(f"{where}unknown key {key!r}; known keys: {', '.join(sorted(names))}")
        changes[key] = _coerce(value, hints[key], key) if isinstance(value, str) else value
    return dataclasses.replace(obj, **changes)
