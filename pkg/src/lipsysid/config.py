"""Experiment configuration: flat ``key = value`` files with sections.

Values from a file override the built-in defaults and command-line flags
override both. ``None`` means "use the system preset".
"""
from __future__ import annotations

import configparser
from dataclasses import fields

from .training import TrainConfig


def _opt(parse):
    def f(raw):
        if raw is None:
            return None
        if isinstance(raw, str) and raw.strip().lower() in ("", "none", "auto"):
            return None
        return parse(raw)

    return f


def _floats(raw):
    if isinstance(raw, (int, float)):
        return [float(raw)]
    if isinstance(raw, str):
        return [float(v) for v in raw.replace(";", ",").split(",") if v.strip()]
    return [float(v) for v in raw]


def _ints(raw):
    return [int(round(v)) for v in _floats(raw)]


def _names(raw):
    items = raw.split(",") if isinstance(raw, str) else [x for r in raw for x in str(r).split(",")]
    return [s.strip() for s in items if s.strip()]


def _bool(raw):
    if isinstance(raw, bool):
        return raw
    s = str(raw).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _delta(raw):
    """``0.05,0.025`` → two scalar radii; ``0.4:0.4:0.05:0.05`` → one per-axis radius."""
    if isinstance(raw, (int, float)):
        return [float(raw)]
    if not isinstance(raw, str):
        out = []
        for v in raw:
            out.extend(_delta(v) if isinstance(v, str) else [v])
        return out
    out = []
    for item in raw.replace(";", ",").split(","):
        item = item.strip()
        if not item:
            continue
        if ":" in item:
            out.append(tuple(float(v) for v in item.split(":")))
        else:
            out.append(float(item))
    return out


def _train_schema():
    schema = {}
    base = TrainConfig()
    for f in fields(TrainConfig):
        default = getattr(base, f.name)
        parse = _opt(int) if default is None else str if isinstance(default, str) else type(default)
        schema[f.name] = (parse, default)
    # lists handled by the CLI
    schema["seeds"] = (_ints, [0])
    schema["subsample"] = (_floats, [1.0])
    schema["reg_grid"] = (_opt(_floats), None)
    return schema


SCHEMA = {
    "run": {
        "seed": (int, 0),
        "out": (str, "runs"),
    },
    "system": {
        "name": (str, "linear"),
        "mu": (_opt(float), None),
    },
    "sampling": {
        "scale": (float, 1.0),
        "rate": (_opt(float), None),
        "duration": (_opt(float), None),
        "trajectory_count": (_opt(int), None),
        "noise_variance": (_opt(float), None),
        "filter_window": (int, 5),
        "dt_internal": (float, 1e-3),
        "clean_k": (_bool, True),
    },
    "model": {
        "kinds": (_names, ["lipnet"]),
        "gamma": (_opt(float), None),
        "widths": (_ints, [64] * 7),
    },
    "train": _train_schema(),
    "verify": {
        "delta": (_delta, [0.05, 0.025]),
        "q": (int, 5),
        "c": (float, 0.0),
        "K": (_opt(float), None),
        "k_neighbors": (int, 10),
    },
    "rollout": {
        "count": (int, 100),
        "t_end": (float, 5.0),
        "a": (_opt(float), None),
        "dt": (float, 1e-2),
    },
    "sweep": {
        "gammas": (_floats, [0.25, 0.5, 1.0, 2.01, 4.0]),
    },
}

# certified bound γ per system when none is configured
DEFAULT_GAMMA = {"linear": 2.01, "vdp": 4.02, "arm": 2.55}


class ConfigError(ValueError):
    pass


def defaults() -> dict:
    return {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}


def parse_value(section: str, key: str, raw):
    try:
        parse, _ = SCHEMA[section][key]
    except KeyError:
        raise ConfigError(f"unknown config key [{section}] {key}") from None
    try:
        return parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r} ({exc})") from None


def load_config(path) -> dict:
    """Read ``path`` over the defaults; unknown sections or keys are errors."""
    cfg = defaults()
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case (K)
    with open(path) as fh:
        cp.read_file(fh)
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown config section [{sec}]")
        for key, raw in cp.items(sec):
            cfg[sec][key] = parse_value(sec, key, raw)
    return cfg


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """``overrides`` maps ``"section.key"`` to raw values; ``None`` values are skipped."""
    for dotted, raw in overrides.items():
        if raw is None:
            continue
        sec, key = dotted.split(".", 1)
        cfg[sec][key] = parse_value(sec, key, raw)
    return cfg


def resolve(path=None, overrides: dict | None = None) -> dict:
    cfg = load_config(path) if path else defaults()
    return apply_overrides(cfg, overrides or {})


def train_config(cfg: dict, **extra) -> TrainConfig:
    keys = {f.name for f in fields(TrainConfig)}
    values = {k: v for k, v in cfg["train"].items() if k in keys}
    values.update(extra)
    return TrainConfig(**values)


def flatten(cfg: dict) -> dict:
    """``{"section.key": value}`` with lists rendered compactly (for artifact headers)."""
    out = {}
    for sec, keys in cfg.items():
        for k, v in keys.items():
            if isinstance(v, (list, tuple)):
                v = ",".join(":".join(repr(e) for e in x) if isinstance(x, tuple) else repr(x) for x in v)
            out[f"{sec}.{k}"] = v
    return out


def dump(cfg: dict) -> str:
    """Render as a config file that :func:`load_config` reads back."""
    lines = []
    for sec, keys in cfg.items():
        lines.append(f"[{sec}]")
        for k, v in keys.items():
            if v is None:
                v = "auto"
            elif isinstance(v, (list, tuple)):
                v = ",".join(":".join(repr(e) for e in x) if isinstance(x, tuple) else str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
