"""Run configuration: one YAML document, every scalar overridable."""
from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .exceptions import ConfigurationError, ParseError

ENV_VAR = "SOFTTRAJ_CONFIG"

# Sections and their defaults.  ``None`` means "unset / derived".
DEFAULTS = {
    "paths": {
        "data": None,              # input CSV
        "out_dir": "runs/default",
        "checkpoint": None,        # default: <out_dir>/model.ckpt
    },
    "data": {
        "id_column": "series_id",
        "timestamp_column": "timestamp",
        "value_column": "value",
        "value_min": None,
        "value_max": None,
        "history": 288,
        "stride": 1,
        "eval_stride": None,       # default: largest horizon
        "max_gap": None,           # seconds; default 1.5x median interval
        "val_fraction": 0.15,
        "test_fraction": 0.15,
        "split_seed": 0,
    },
    "model": {
        "n_bins": 64,
        "clamp": 3.0,
        "d_model": 64,
        "n_layers": 2,
        "n_heads": 2,
        "max_len": 512,
    },
    "train": {
        "batch_size": 64,
        "lr_stage1": 1e-4,
        "lr_stage2": 1e-5,
        "clip_norm": 1.0,
        "patience": 5,
        "max_epochs": 50,
        "max_epochs_stage2": None,
        "max_batches_per_epoch": None,
        "max_val_windows": None,
        "seed": 0,
        "trajectory_training": True,
    },
    "decode": {
        "risk_aware": True,
        "lam": 10.0,
        "mode": "auto",            # auto: soft-risk with trajectory training, else hard median
        "sample_count": 5,
        "seed": 0,
    },
    "eval": {
        "horizons": [6, 12, 24, 48],
        "grid": "clarke",
        "levels": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95],
        "max_windows": None,
        "lambdas": [0, 3, 10, 30, 100, 200],
    },
}


def _merge(base: dict, update: dict, where: str) -> None:
    for key, value in update.items():
        if key not in base:
            raise ConfigurationError(f"unknown config key '{where}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key '{where}{key}' must be a mapping")
            _merge(base[key], value, f"{where}{key}.")
        else:
            base[key] = value


def parse_override(text: str):
    """``section.key=value`` with the value parsed as YAML."""
    if "=" not in text:
        raise ConfigurationError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigurationError(f"--set key must look like section.name, got {key!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        raise ConfigurationError(f"cannot parse value in --set {text!r}") from None
    return parts[0], parts[1], value


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the config file (``path`` or ``$SOFTTRAJ_CONFIG``), then overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    path = path or os.environ.get(ENV_VAR)
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(p)
        try:
            doc = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ParseError(f"{p}: invalid YAML",
                             line=None if mark is None else mark.line + 1) from None
        if not isinstance(doc, dict):
            raise ConfigurationError(f"{p}: top level must be a mapping")
        _merge(cfg, doc, "")
    for text in overrides:
        section, key, value = parse_override(text)
        _merge(cfg, {section: {key: value}}, "")
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    h = cfg["eval"]["horizons"]
    if not isinstance(h, list) or not h or any(not isinstance(x, int) or x < 1 for x in h):
        raise ConfigurationError("eval.horizons must be a non-empty list of positive integers")
    if cfg["data"]["history"] < 2:
        raise ConfigurationError("data.history must be >= 2")
    if cfg["decode"]["mode"] not in ("auto", "soft-risk", "soft-mse", "hard-sample-median"):
        raise ConfigurationError(f"unknown decode.mode {cfg['decode']['mode']!r}")
    if cfg["decode"]["lam"] < 0:
        raise ConfigurationError("decode.lam must be >= 0")
    for q in cfg["eval"]["levels"]:
        if not 0 < q < 1:
            raise ConfigurationError("eval.levels must lie in (0, 1)")


def decode_mode(cfg: dict) -> str:
    mode = cfg["decode"]["mode"]
    if mode == "auto":
        return "soft-risk" if cfg["train"]["trajectory_training"] else "hard-sample-median"
    return mode


def effective_lambda(cfg: dict) -> float:
    if not cfg["decode"]["risk_aware"] or decode_mode(cfg) == "soft-mse":
        return 0.0
    return float(cfg["decode"]["lam"])


def checkpoint_path(cfg: dict) -> Path:
    ck = cfg["paths"]["checkpoint"]
    return Path(ck) if ck else Path(cfg["paths"]["out_dir"]) / "model.ckpt"


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=False))
