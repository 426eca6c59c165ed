"""Flat ``key=value`` config files.

One key per line, ``#`` starts a comment. Values are parsed against the
annotated type of the matching dataclass field.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Mapping


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"))


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return str(value)


def dump_kv(obj: Any) -> str:
    """Serialize a dataclass instance, one field per line, in field order."""
    lines = [f"{f.name}={_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"


def _coerce(raw: str, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    if origin is tuple:
        (elem, *_rest) = typing.get_args(tp)
        return tuple(_coerce(part.strip(), elem, key) for part in raw.split(",") if part.strip())
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def from_kv(cls: type, values: Mapping[str, str], *, require_all: bool = False, **overrides: Any):
    """Build dataclass ``cls`` from string values.

    Unknown keys are rejected. With ``require_all`` every field must be
    present, which is how the CLI enforces complete config files.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if require_all:
        missing = [n for n in (f.name for f in dataclasses.fields(cls)) if n not in values and n not in overrides]
        if missing:
            raise ConfigError(f"missing config key(s): {', '.join(missing)}")
    kwargs = {k: _coerce(v, hints[k], k) for k, v in values.items()}
    kwargs.update(overrides)
    return cls(**kwargs)
