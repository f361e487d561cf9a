"""Experiment configuration: JSON documents validated against ``config_schema.json``."""
from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping

import jsonschema

from .errors import ConfigError

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "dataset": {"kind": "synthetic", "num_classes": 10, "samples_per_class": 200, "image_size": 16,
                "seed": 7, "test_fraction": 0.25},
    "architecture": {"name": "mininet", "in_channels": 1, "image_size": 16, "widths": [16, 32],
                     "num_classes": 10, "kind": "V3", "normalize_input": True},
    "passport": {"type": "random_pattern", "seed": 0},
    "train": {"epochs": 12, "batch_size": 32, "lr": 0.05, "momentum": 0.9, "weight_decay": 5e-4,
              "schedule": "cosine", "init_mode": "from_scratch", "telemetry": True},
    "attacks": [{"kind": "T1", "trials": 200}],
    "thresholds": {"tau_d": 1.0, "tau_s": 50.0, "epsilon_match": 2.0},
    "signature": {"grid": [0.0, 0.1, 0.25, 0.5, 0.75, 1.0], "seeds_per_point": 20},
    "histogram_bin_width": 2.0,
}


def schema() -> dict:
    return json.loads(resources.files("nnpassport").joinpath("config_schema.json").read_text())


def _merge(base: dict, update: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(config: Mapping) -> None:
    try:
        jsonschema.validate(dict(config), schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from None
    if config.get("passport", {}).get("type") == "random_image" and "num_images" not in config["passport"]:
        raise ConfigError("random_image passports need passport.num_images (N has no default)")
    if 0.0 not in config.get("signature", {}).get("grid", [0.0]):
        raise ConfigError("signature.grid must include 0")


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override {text!r} has an empty key")
    return path, value


def apply_overrides(config: dict, overrides: Iterable[str]) -> dict:
    out = copy.deepcopy(config)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for p in path[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {}
            node = node[p]
        node[path[-1]] = value
    return out


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), seed: int | None = None) -> dict:
    """Defaults, then the file, then ``key=value`` overrides; validated before return."""
    user: dict = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        validate(user)
    config = _merge(DEFAULTS, user)
    config = apply_overrides(config, overrides)
    if seed is not None:
        config["seed"] = seed
    validate(config)
    return config
