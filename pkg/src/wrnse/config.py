"""Key-value config files shared by the trainer and the CLI.

Format: one ``key = value`` per line, ``#`` comments, blank lines ignored.
Environment variables ``WRNSE_<KEY>`` (upper case) override file values.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

ENV_PREFIX = "WRNSE_"
REQUIRED = object()


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: type
    default: object
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    doc: str = ""

    def describe(self):
        if self.kind is bool:
            return "true or false"
        if self.kind is tuple:
            return "comma-separated list of positive integers"
        if self.kind is str:
            return "a path or string"
        lo = "-inf" if self.lo is None else self.lo
        hi = "inf" if self.hi is None else self.hi
        return f"{self.kind.__name__} in {'(' if self.lo_open else '['}{lo}, {hi}]"


TRAIN_KEYS = {
    "manifest": Key(str, REQUIRED, doc="corpus manifest (clean, or clean+noisy pairs)"),
    "out_dir": Key(str, REQUIRED, doc="directory for checkpoints and the metrics log"),
    "max_steps": Key(int, REQUIRED, 1, None),
    "block_len": Key(int, 200, 3, None),
    "batch_size": Key(int, 8, 1, None),
    "lr": Key(float, 1e-3, 0.0, None),
    "beta1": Key(float, 0.9, 0.0, 1.0),
    "beta2": Key(float, 0.999, 0.0, 1.0),
    "eps": Key(float, 1e-8, 0.0, None, lo_open=True),
    "weight_decay": Key(float, 1e-5, 0.0, None),
    "seed": Key(int, 0, 0, None),
    "checkpoint_every": Key(int, 100, 1, None),
    "eval_hold_out": Key(float, 0.0, 0.0, 0.5),
    "time_scale": Key(bool, True),
    "widen_factor": Key(int, 2, 1, None),
    "base_widths": Key(tuple, (16, 32, 64, 128)),
    "blocks_per_wrb": Key(int, 2, 1, None),
    "noise_dir": Key(str, ""),
    "log_every": Key(int, 1, 1, None),
}


def _coerce(name, key, raw):
    text = str(raw).strip()
    try:
        if key.kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if key.kind is tuple:
            vals = tuple(int(v) for v in text.replace(" ", "").split(",") if v)
            if not vals or any(v < 1 for v in vals):
                raise ValueError(text)
            return vals
        value = key.kind(text)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {text!r}; expected {key.describe()}") from None
    if key.kind in (int, float):
        below = key.lo is not None and (value <= key.lo if key.lo_open else value < key.lo)
        above = key.hi is not None and value > key.hi
        if below or above:
            raise ConfigError(f"config key {name!r}={value} out of range; expected {key.describe()}")
    return value


def parse_text(text):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve(raw, keys=TRAIN_KEYS, env=None, overrides=None):
    """Validate raw string values against ``keys``; fill defaults, apply overrides."""
    env = os.environ if env is None else env
    raw = dict(raw)
    for name in keys:
        env_name = ENV_PREFIX + name.upper()
        if env_name in env:
            raw[name] = env[env_name]
    for name, value in (overrides or {}).items():
        if value is not None:
            raw[name] = value
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}; accepted keys: {', '.join(sorted(keys))}")
    out = {}
    for name, key in keys.items():
        if name not in raw:
            if key.default is REQUIRED:
                raise ConfigError(f"missing config key {name!r}; expected {key.describe()}")
            out[name] = key.default
        else:
            out[name] = _coerce(name, key, raw[name])
    return out


def load(path, keys=TRAIN_KEYS, env=None, overrides=None):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values = resolve(parse_text(text), keys, env, overrides)
    # relative paths are taken relative to the config file
    for name, key in keys.items():
        if key.kind is str and values[name] and name in ("manifest", "out_dir", "noise_dir"):
            p = Path(values[name])
            values[name] = str(p if p.is_absolute() else path.parent / p)
    return values


def dump(values):
    lines = []
    for k in sorted(values):
        v = values[k]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
