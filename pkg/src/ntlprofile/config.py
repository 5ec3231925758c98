"""Flat ``key=value`` configuration files."""

from __future__ import annotations

from dataclasses import asdict, fields


class ConfigError(ValueError):
    pass


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def to_text(obj) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in asdict(obj).items())


def parse_key_values(text: str, cls) -> dict:
    """Parse flat ``key=value`` lines into typed kwargs for dataclass ``cls``."""
    types = {f.name: f.type for f in fields(cls)}
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep:
            raise ConfigError(f"line {lineno}: expected key=value")
        if key not in types:
            raise ConfigError(f"unknown config key: {key}")
        kind = type(defaults[key])
        try:
            if kind is bool:
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                out[key] = value.lower() in ("true", "1", "yes")
            else:
                out[key] = kind(value)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {value!r}") from None
    return out
