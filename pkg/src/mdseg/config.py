"""Single-file JSON run configuration.

One document carries the data-generation recipe, the training
hyperparameters, and the refinement settings, so a run is reproducible from
exactly one artifact. Loading fills omitted keys with defaults and rejects
keys that do not exist, which makes load -> dump -> load a fixed point.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .datagen import DEFAULT_DOMAINS, DomainSpec
from .errors import ConfigError, FilesystemError
from .model import VARIANTS, TrainConfig
from .refine import RefineConfig

_TUPLE_FIELDS = ("size_range", "eccentricity_range")


def _domain_entry(spec: DomainSpec, n_train: int, n_test: int) -> dict:
    entry = dataclasses.asdict(spec)
    for key in _TUPLE_FIELDS:
        entry[key] = list(entry[key])
    entry["n_train"] = n_train
    entry["n_test"] = n_test
    return entry


def default_config() -> dict:
    return {
        "data": {
            "resolution": 64,
            "seed": 1,
            "domains": [_domain_entry(spec, 500, 100)
                        for spec in DEFAULT_DOMAINS],
        },
        "train": {
            "variant": "md",
            "arch_preset": "standard",
            **dataclasses.asdict(TrainConfig()),
        },
        "refine": dataclasses.asdict(RefineConfig()),
    }


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    for key in given:
        if key not in defaults:
            raise ConfigError(f"unknown config key {path + key!r}")
    merged = {}
    for key, default in defaults.items():
        if key not in given:
            merged[key] = default
        elif isinstance(default, dict):
            if not isinstance(given[key], dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            merged[key] = _merge(default, given[key], f"{path}{key}.")
        else:
            merged[key] = given[key]
    return merged


def normalize_config(raw: dict) -> dict:
    """Fill defaults, reject unknown keys, and validate all sections."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    base = default_config()
    domains = raw.get("data", {}).get("domains") if isinstance(raw.get("data"), dict) else None
    cfg = _merge(base, raw)
    if domains is not None:
        if not isinstance(domains, list) or not domains:
            raise ConfigError("data.domains must be a non-empty list")
        entry_defaults = _domain_entry(DEFAULT_DOMAINS[0], 500, 100)
        cfg["data"]["domains"] = [
            _merge(entry_defaults, d, f"data.domains[{i}].")
            for i, d in enumerate(domains)
        ]
    # construct the typed views once so field validation runs at load time
    try:
        domain_specs(cfg)
        train_config(cfg)
        refine_config(cfg)
    except TypeError as e:
        raise ConfigError(f"invalid config value: {e}") from None
    if cfg["train"]["variant"] not in VARIANTS:
        raise ConfigError(f"train.variant must be one of {VARIANTS}")
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FilesystemError(f"cannot read config {path}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return normalize_config(raw)


def dumps_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def dump_config(cfg: dict, path) -> None:
    try:
        Path(path).write_text(dumps_config(cfg))
    except OSError as e:
        raise FilesystemError(f"cannot write config {path}: {e}") from e


def apply_overrides(cfg: dict, assignments) -> dict:
    """Apply ``section.key=value`` strings; values parse as JSON literals.

    Unparseable values pass through as strings, so
    ``train.domain_schedule=round_robin`` works without extra quoting.
    """
    for raw in assignments:
        if "=" not in raw:
            raise ConfigError(f"override {raw!r} is not of the form key=value")
        dotted, text = raw.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node = node[part]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return normalize_config(cfg)


def domain_specs(cfg: dict) -> list[tuple[DomainSpec, int, int]]:
    """The data section as generate_dataset input triples."""
    triples = []
    for entry in cfg["data"]["domains"]:
        fields = {k: v for k, v in entry.items()
                  if k not in ("n_train", "n_test")}
        for key in _TUPLE_FIELDS:
            fields[key] = tuple(fields[key])
        triples.append((DomainSpec(**fields),
                        int(entry["n_train"]), int(entry["n_test"])))
    return triples


def train_config(cfg: dict) -> TrainConfig:
    fields = {k: v for k, v in cfg["train"].items()
              if k not in ("variant", "arch_preset")}
    return TrainConfig(**fields)


def refine_config(cfg: dict) -> RefineConfig:
    return RefineConfig(**cfg["refine"])
