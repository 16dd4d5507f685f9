"""Flat ``key=value`` config files with ``include=<path>`` support."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def read_kv(path, _seen=None) -> dict[str, str]:
    """Parse a key=value file. ``include=other.cfg`` is expanded in place; later keys win."""
    path = Path(path)
    seen = set() if _seen is None else _seen
    real = path.resolve()
    if real in seen:
        raise ConfigError(f"include cycle at {path}")
    seen.add(real)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "include":
            out.update(read_kv(path.parent / val, seen))
        else:
            out[key] = val
    seen.discard(real)
    return out


def parse_kv_text(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            if "=" not in line:
                raise ConfigError(f"expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _coerce(value: str, typ):
    origin = typing.get_origin(typ)
    if typ is bool or typ == "bool":
        return value.lower() in ("1", "true", "yes", "on")
    if typ is int or typ == "int":
        return int(value)
    if typ is float or typ == "float":
        return float(value)
    if origin is tuple or typ is tuple or typ in ("tuple", "tuple[float, float]"):
        return tuple(float(x) for x in value.replace("(", "").replace(")", "").split(","))
    return value


def apply_overrides(cfg, values: dict[str, str]):
    """Return ``cfg`` (a dataclass) with string overrides coerced to field types."""
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    hints = typing.get_type_hints(type(cfg))
    kwargs = {}
    for key, val in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r} for {type(cfg).__name__}")
        try:
            kwargs[key] = _coerce(val, hints.get(key, str))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {val!r}") from exc
    return dataclasses.replace(cfg, **kwargs)


def dump_kv(cfg) -> str:
    lines = []
    for k, v in dataclasses.asdict(cfg).items():
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        lines.append(f"{k}={v}")
    return "\n".join(lines) + "\n"
