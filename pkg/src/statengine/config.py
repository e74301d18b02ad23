"""Flat ``key = value`` configuration store.

The engine keeps a handful of tunables (the calibrated write/read cost
factor ``alpha``, the dense-conversion memory cap) in a human-editable text
file. Lines starting with ``#`` are comments.
"""

import os
from pathlib import Path

DEFAULT_ALPHA = 10.0
DEFAULT_MEMORY_CAP = 2 * 1024**3

ENV_VAR = "STATENGINE_CONFIG"


def default_config_path():
    env = os.environ.get(ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".config" / "statengine" / "engine.conf"


def parse_config(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def read_config(path=None):
    path = Path(path) if path is not None else default_config_path()
    if not path.exists():
        return {}
    return parse_config(path.read_text())


def write_config(values, path=None):
    """Merge ``values`` into the file at ``path``, replacing it atomically."""
    path = Path(path) if path is not None else default_config_path()
    merged = read_config(path)
    merged.update({k: str(v) for k, v in values.items()})
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(f"{k} = {v}\n" for k, v in sorted(merged.items())))
    os.replace(tmp, path)
    return path


def get_float(key, default, path=None):
    value = read_config(path).get(key)
    return float(value) if value is not None else default


def get_alpha(path=None):
    return get_float("alpha", DEFAULT_ALPHA, path)


def get_memory_cap(path=None):
    return int(get_float("memory_cap_bytes", DEFAULT_MEMORY_CAP, path))
