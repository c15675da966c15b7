"""Run configuration: a JSON file merged over defaults, plus ``--set`` overrides."""
from __future__ import annotations

import copy
import json
import math
from pathlib import Path

DEFAULTS = {
    "seed": 0,
    "paths": {
        "input_dir": "data/nifti",
        "output_dir": "data/work",
        "checkpoint": "data/work/model.json",
    },
    "window": [-1000.0, 400.0],
    "phantom": {
        "n": 24,
        "spec": {},
    },
    "split": {
        "fractions": [0.82, 0.10, 0.08],
        "unit": "patient",
    },
    "augment": {
        "spec": None,
        "copies": 1,
    },
    "model": {},
    "train": {
        "lr": 1e-3,
        "batch_size": 8,
        "steps": 2000,
        "checkpoint_every": 0,
        "augment": False,
    },
    "eval": {
        "subset": "test",
        "ground_truth_as_prediction": False,
        "reduction": "pooled",
    },
    "infer": {
        "subset": "all",
    },
    "triage": {
        "thresholds": [25.0, 50.0],
    },
    "report": {
        "ground_truth": False,
    },
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b.c=value``; the value is JSON when it parses, else a string."""
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(cfg: dict, keys: list[str], value) -> None:
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {'.'.join(keys)}: {k} is not a section")
    node[keys[-1]] = value


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Defaults <- config file <- ``--set`` overrides <- ``--seed``.

    Relative paths are resolved against the config file's directory (or the
    working directory when no file is given) and stored absolute.
    """
    cfg = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            user = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
        base = path.resolve().parent
    for item in overrides:
        apply_override(cfg, *parse_override(item))
    if seed is not None:
        cfg["seed"] = int(seed)
    for key, value in cfg["paths"].items():
        p = Path(value)
        cfg["paths"][key] = str(p if p.is_absolute() else (base / p))
    aug = cfg["augment"].get("spec")
    if isinstance(aug, str):
        p = Path(aug)
        cfg["augment"]["spec"] = str(p if p.is_absolute() else (base / p))
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    fr = cfg["split"]["fractions"]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError(f"split.fractions must be three non-negative values summing to 1, got {fr}")
    if cfg["split"]["unit"] not in ("patient", "slice"):
        raise ConfigError("split.unit must be 'patient' or 'slice'")
    lo, hi = cfg["window"]
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ConfigError(f"window must satisfy lo < hi, got {cfg['window']}")
    t = cfg["train"]
    if t["steps"] < 0 or t["batch_size"] < 1 or t["lr"] < 0:
        raise ConfigError("train needs steps >= 0, batch_size >= 1, lr >= 0")
    t1, t2 = cfg["triage"]["thresholds"]
    if not 0 <= t1 < t2 <= 100:
        raise ConfigError(f"triage.thresholds must satisfy 0 <= t1 < t2 <= 100, got {[t1, t2]}")
    for section in ("eval", "infer"):
        if cfg[section]["subset"] not in ("train", "val", "test", "all"):
            raise ConfigError(f"{section}.subset must be one of train/val/test/all")
