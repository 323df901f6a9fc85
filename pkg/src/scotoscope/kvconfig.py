"""Plain-text ``key = value`` configuration files shared by the CLI commands.

Blank lines and ``#`` comments are ignored. Values stay strings; callers
convert them.
"""

from pathlib import Path

from .errors import ConfigError, IoError


def parse_kv(text, source="<string>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def format_kv(mapping):
    return "".join(f"{k} = {v}\n" for k, v in mapping.items())


def to_float(key, value):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None


def to_int(key, value):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None


def to_range(key, value):
    parts = value.split(",")
    if len(parts) != 2:
        raise ConfigError(f"{key}: expected 'low, high', got {value!r}")
    return (to_float(key, parts[0]), to_float(key, parts[1]))
