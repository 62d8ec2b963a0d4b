"""Flat key/value run configuration.

Config files are plain text, one ``key = value`` per line, ``#`` starts a
comment. Every key has a typed default below; unknown keys are rejected so
typos fail loudly. Command-line ``--set key=value`` pairs override file
values, and the canonical serialization of the merged result is hashed to
name run directories.
"""

from __future__ import annotations

import hashlib

from .exceptions import ConfigError

# key -> (default, type tag); tags: int, float, bool, str, int_list, delim
SCHEMA: dict[str, tuple] = {
    "dataset.path": ("", "str"),
    "dataset.delimiter": ("\t", "delim"),
    "dataset.columns": ((0, 1, 2), "int_list"),
    "traj.k": (5, "int"),
    "traj.n_max": (50, "int"),
    "model.d": (128, "int"),
    "model.blocks": (4, "int"),
    "model.heads": (4, "int"),
    "model.dropout": (0.1, "float"),
    "model.mask": ("causal", "str"),
    "model.cosine": (False, "bool"),
    "diffusion.steps": (50, "int"),
    "diffusion.beta_start": (1e-4, "float"),
    "diffusion.beta_end": (0.02, "float"),
    "loss.lambda": (0.1, "float"),
    "loss.gamma": (0.0, "float"),
    "loss.reg": (1.0, "float"),
    "train.lr": (1e-3, "float"),
    "train.batch": (256, "int"),
    "train.epochs": (1000, "int"),
    "train.patience": (5, "int"),
    "train.eval_every": (1, "int"),
    "train.seed": (0, "int"),
    "train.select_topk": (5, "int"),
    "train.no_listpref": (False, "bool"),
    "train.no_simple": (False, "bool"),
    "train.no_reg": (False, "bool"),
    "train.trajectory_only": (False, "bool"),
    "infer.steps": (1, "int"),
    "infer.topk": (10, "int"),
    "infer.exclude_previous": (False, "bool"),
    "eval.topk": ((5, 10, 20), "int_list"),
    "eval.steps": ((1,), "int_list"),
    "eval.batch": (256, "int"),
    "eval.seed": (0, "int"),
}


def defaults() -> dict:
    return {key: value for key, (value, _) in SCHEMA.items()}


def _parse_value(key: str, raw: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    kind = SCHEMA[key][1]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind == "int_list":
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if kind == "delim":
            # a bare tab would be eaten by whitespace stripping
            return "\t" if raw in ("", "\\t", "tab") else raw
        return raw
    except ValueError as err:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {kind})") from err


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a {key: typed value} dict."""
    values: dict = {}
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {line_number} is not 'key = value': {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        values[key] = _parse_value(key, raw)
    return values


def load_config(path=None, overrides=None) -> dict:
    """Defaults, then the file, then --set overrides; later wins."""
    merged = defaults()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            merged.update(parse_config_text(fh.read()))
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        merged[key] = _parse_value(key, raw)
    return merged


def format_config(config: dict) -> str:
    """Canonical text form: sorted keys, lists as comma strings."""
    lines = []
    for key in sorted(config):
        value = config[key]
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        elif value == "\t":
            value = "\\t"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(config: dict) -> str:
    """Short content digest used to name run directories."""
    return hashlib.sha256(format_config(config).encode("utf-8")).hexdigest()[:12]
