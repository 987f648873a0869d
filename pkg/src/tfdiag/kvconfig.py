"""Human-readable ``key = value`` configuration blocks.

Values are parsed as int, float, bool, comma-separated tuples or plain strings;
an empty value means None.
Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
from typing import Any

from .errors import ConfigError


def parse_value(text: str) -> Any:
    text = text.strip()
    if "," in text:
        return tuple(parse_value(t) for t in text.split(",") if t.strip())
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if not text:
        return None
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def format_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value) + ("," if len(value) == 1 else "")
    if isinstance(value, float):
        return repr(float(value))
    if value is None:
        return ""
    return str(value)


def loads(text: str) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = parse_value(val)
    return out


def dumps(values: dict[str, Any]) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in values.items())


def load(path) -> dict[str, Any]:
    with open(path) as fh:
        return loads(fh.read())


def build(cls, values: dict[str, Any], strict: bool = True):
    """Instantiate dataclass ``cls`` from a dict, coercing tuples and rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in fields:
            if strict:
                raise ConfigError(f"unknown {cls.__name__} key {key!r}")
            continue
        default = fields[key].default
        if isinstance(default, tuple) and not isinstance(val, tuple):
            val = (val,)
        elif isinstance(default, float) and isinstance(val, int):
            val = float(val)
        kwargs[key] = val
    return cls(**kwargs)
