"""Flat ``key = value`` config text, mapped onto dataclasses.

Keys are dotted by section (``model.dim``, ``train.epochs``, ``augment.noise_prob``,
``data.task``). Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import enum
import types
import typing
from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def dump_kv(items: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in items.items())


def _convert(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", "null", ""):
            return None
        return _convert(raw, args[0], key)
    try:
        if tp is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            args = typing.get_args(tp)
            parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
            elem = args[0]
            return tuple(_convert(p.strip(), elem, key) for p in parts)
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            parse = getattr(tp, "parse", None)
            return parse(raw) if parse else tp(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {tp}") from exc
    raise ConfigError(f"{key}: unsupported field type {tp}")


def from_kv(cls, kv: dict[str, str], section: str, strict: bool = True):
    """Build dataclass ``cls`` from the ``section.*`` keys of ``kv``.

    Missing keys keep their defaults. With ``strict``, unknown keys in the
    section raise :class:`ConfigError`.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    prefix = section + "."
    kwargs = {}
    for key, raw in kv.items():
        if not key.startswith(prefix):
            continue
        name = key[len(prefix):]
        if name not in names:
            if strict:
                raise ConfigError(f"unknown config key {key!r}; known: {sorted(prefix + n for n in names)}")
            continue
        kwargs[name] = _convert(raw, hints[name], key)
    return cls(**kwargs)


def to_kv(obj, section: str) -> dict[str, object]:
    return {f"{section}.{f.name}": getattr(obj, f.name) for f in dataclasses.fields(obj) if f.init}
