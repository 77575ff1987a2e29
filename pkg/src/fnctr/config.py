"""Experiment configuration: JSON file, then ``FNCTR_*`` environment, then CLI flags."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .core import ATTRIBUTION_WINDOW, ConfigError, Hyperparams
from .losses import LOSS_NAMES
from .trainer import MODEL_KINDS

ENV_PREFIX = "FNCTR_"
MODES = ("offline", "continuous")

DEFAULTS = {
    "name": "run",
    "seed": 0,
    "model": "logistic",
    "loss": "log",
    "mode": "continuous",
    "epochs": 1,
    "snapshot_every": 100,
    "hyper": {},
    "model_options": {"embedding_dim": 16, "pooling": "sum", "leaky_slope": 0.01, "cross_spec": None},
    "data": {"dir": "data", "train_source": "auto", "downsample_negatives": False},
    "eval": {"snapshot_time": None, "window": ATTRIBUTION_WINDOW, "n_bins": 20},
}

# flag/env name -> top-level key and type
OVERRIDES = {"seed": int, "loss": str, "model": str, "mode": str, "name": str,
             "epochs": int, "snapshot_every": int}


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        r = self.raw
        if r["model"] not in MODEL_KINDS:
            raise ConfigError(f"unknown model {r['model']!r}")
        if r["loss"] not in LOSS_NAMES:
            raise ConfigError(f"unknown loss {r['loss']!r}")
        if r["mode"] not in MODES:
            raise ConfigError(f"unknown mode {r['mode']!r}")
        if int(r["epochs"]) < 0 or int(r["snapshot_every"]) < 1:
            raise ConfigError("epochs must be >= 0 and snapshot_every >= 1")
        if r["data"].get("train_source", "auto") not in ("auto", "stream", "snapshot"):
            raise ConfigError("data.train_source must be auto, stream or snapshot")
        self.hyper  # validates

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def hyper(self) -> Hyperparams:
        h = dict(self.raw["hyper"])
        h["seed"] = self.raw["seed"]
        try:
            return Hyperparams(**h)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def train_source(self) -> str:
        src = self.raw["data"].get("train_source", "auto")
        if src == "auto":
            return "snapshot" if self.raw["loss"] == "delayed_feedback" else "stream"
        return src

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)


def _coerce(name, value, typ):
    try:
        return typ(value)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {value!r}") from None


def load_config(path: Optional[str] = None, flags: Optional[dict] = None,
                environ=None) -> ExperimentConfig:
    raw = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        if "config" in data and "steps" in data:  # a run manifest
            data = data["config"]
        raw = _merge(raw, data)
    environ = os.environ if environ is None else environ
    for key, typ in OVERRIDES.items():
        env = environ.get(ENV_PREFIX + key.upper())
        if env is not None:
            raw[key] = _coerce(ENV_PREFIX + key.upper(), env, typ)
    for key, val in (flags or {}).items():
        if val is not None:
            raw[key] = _coerce(key, val, OVERRIDES[key])
    return ExperimentConfig(raw)
