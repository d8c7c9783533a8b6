"""Declarative run configuration: YAML file, dotted-key overrides, digest."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import re
from pathlib import Path

import yaml

DEFAULTS: dict = {
    "case": "case2_bistable",
    "seed": 0,
    "workers": 1,
    "solver": {"max_iter": 150, "feas_tol": 1e-6, "grad_tol": 1e-8, "comp_tol": 1e-8},
    "generate": {
        "profile": {"kind": "daily", "n": 100, "jitter": 0.0, "granularity_s": 30.0, "scale_range": None,
                    "bus": None, "q_range": None},
        "k_init": 40,
        "angle_range": math.pi / 6,
        "rule": None,
    },
    "train": {
        "dataset": None,
        "scheme": "augmented",
        "mix": None,
        "drop_incomplete": True,
        "split": {"train_fraction": 0.8, "seed": 0},
        "hidden": [1024, 768, 512],
        "batch_size": 50,
        "epochs": 4000,
        "learning_rate": 1e-4,
        "final_learning_rate": None,
        "val_fraction": 0.1,
        "init_seed": 0,
        "shuffle_seed": 0,
        "log_every": 0,
    },
    "evaluate": {
        "columns": [],
        "timing": True,
        "solver_samples": None,
        "audit": None,
        "curve": None,
    },
}


class ConfigError(ValueError):
    """Bad or inconsistent configuration."""


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-4`` (no decimal point) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def _yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value`` with ``value`` read as YAML."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = _yaml(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    return key.strip().split("."), value


def apply_override(cfg: dict, keys: list[str], value) -> None:
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {'.'.join(keys)!r}")
    node[keys[-1]] = value


def load_config(path: str | Path | None = None, overrides=()) -> dict:
    """Defaults, then the file, then overrides (flags win)."""
    user: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            user = _yaml(p.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    cfg = _merge(DEFAULTS, user)
    for item in overrides:
        keys, value = parse_override(item) if isinstance(item, str) else item
        apply_override(cfg, keys, value)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    g, t = cfg["generate"], cfg["train"]
    if not isinstance(g["k_init"], int) or g["k_init"] < 1:
        raise ConfigError(f"generate.k_init must be a positive integer, got {g['k_init']!r}")
    if g["profile"]["kind"] not in ("daily", "constant", "sweep"):
        raise ConfigError("generate.profile.kind must be daily, constant or sweep")
    if g["profile"]["kind"] == "sweep" and (g["profile"]["bus"] is None or g["profile"]["q_range"] is None):
        raise ConfigError("a sweep profile needs generate.profile.bus and generate.profile.q_range")
    if not isinstance(g["profile"]["n"], int) or g["profile"]["n"] < 1:
        raise ConfigError("generate.profile.n must be a positive integer")
    if t["scheme"] not in ("augmented", "baseline"):
        raise ConfigError(f"train.scheme must be augmented or baseline, got {t['scheme']!r}")
    if not isinstance(t["batch_size"], int) or t["batch_size"] < 1:
        raise ConfigError("train.batch_size must be a positive integer")
    if not isinstance(t["epochs"], int) or t["epochs"] < 0:
        raise ConfigError("train.epochs must be a non-negative integer")
    if not isinstance(t["learning_rate"], (int, float)) or not t["learning_rate"] > 0:
        raise ConfigError("train.learning_rate must be positive")
    if not isinstance(cfg["workers"], int) or cfg["workers"] < 1:
        raise ConfigError("workers must be a positive integer")


def config_digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True, default_flow_style=False)
