"""Experiment configuration: a nested JSON document, validated before any work.

Unknown keys are rejected at every level so typos fail loudly.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticSpec
from .errors import ConfigError
from .inference import DEFAULT_ALPHAS
from .rl import RewardConfig
from .training import TrainConfig

OUT_ENV = "EXITLAB_OUT"

DEFAULTS = {
    "seed": 0,
    "out": None,
    "model": {"num_layers": 12, "hidden_dim": 32, "policy_hidden_dim": 16},
    "train": {
        "init_epochs": 30, "policy_epochs": 4, "task_epochs": 2, "rounds_max": 10,
        "lr_init": 0.05, "lr_policy": 0.5, "lr_task": 0.02,
        "reward": {"alpha": 0.02, "variant": "hardness"},
        "K": 4, "eps_schedule": [0.3, 0.0], "patience": 3, "batch_size": 32,
    },
    "data": {
        "synthetic": {"num_classes": 2, "n": 4000, "feature_dim": 8, "easy_fraction": 0.5,
                      "margin_easy": 3.0, "margin_hard": 1.0, "noise": 0.1},
        "path": None,
        "format": "delimited",
        "num_classes": None,
    },
    "split": [0.7, 0.15, 0.15],
    "eval": {"entropy_thresholds": [0.1, 0.3, 0.5]},
    "sweep": {"alphas": list(DEFAULT_ALPHAS), "seeds": [0, 1, 2]},
    "gradcheck": {"seeds": 20, "h": 1e-5, "tolerance": 1e-4},
}

# sections whose values are free-form leaves rather than nested key sets
_LEAF_KEYS = {"eps_schedule", "split", "alphas", "seeds", "entropy_thresholds"}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {where!r}")
        if isinstance(base[key], dict) and key not in _LEAF_KEYS:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a mapping")
        cfg = cls(_merge(DEFAULTS, doc))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
        return cls.from_dict(doc)

    def override(self, seed=None, out=None, alpha=None) -> "ExperimentConfig":
        doc = copy.deepcopy(self.raw)
        if seed is not None:
            doc["seed"] = seed
        if out is not None:
            doc["out"] = str(out)
        if alpha is not None:
            doc["train"]["reward"]["alpha"] = alpha
        cfg = ExperimentConfig(doc)
        cfg.validate()
        return cfg

    # -- typed views -------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def out_dir(self) -> Path:
        if self.raw["out"]:
            return Path(self.raw["out"])
        return Path(os.environ.get(OUT_ENV, "runs")) / f"exp-{self.hash}"

    @property
    def synthetic(self) -> SyntheticSpec:
        return SyntheticSpec(**self.raw["data"]["synthetic"])

    @property
    def train(self) -> TrainConfig:
        t = dict(self.raw["train"])
        t["reward"] = RewardConfig(**t["reward"])
        t["eps_schedule"] = tuple(t["eps_schedule"])
        return TrainConfig(seed=self.seed, **t)

    @property
    def hash(self) -> str:
        """Digest of the canonical config, excluding the output location."""
        doc = {k: v for k, v in self.raw.items() if k != "out"}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self):
        r = self.raw
        if not isinstance(r["seed"], int) or isinstance(r["seed"], bool) or not 0 <= r["seed"] < 2**64:
            raise ConfigError(f"seed must be a non-negative integer, got {r['seed']!r}")
        for key, value in r["model"].items():
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{key} must be a positive integer, got {value!r}")
        if r["model"]["num_layers"] < 2:
            raise ConfigError("model.num_layers must be >= 2")
        try:
            self.synthetic.validate()
            self.train.validate()
        except TypeError as e:
            raise ConfigError(str(e)) from None
        if r["data"]["format"] not in ("delimited", "record-per-line"):
            raise ConfigError("data.format must be 'delimited' or 'record-per-line'")
        split = r["split"]
        if (not isinstance(split, list) or len(split) != 3 or any(not isinstance(v, (int, float)) or v <= 0 for v in split)
                or abs(sum(split) - 1.0) > 1e-9):
            raise ConfigError(f"split must be three positive fractions summing to 1, got {split!r}")
        if not r["sweep"]["alphas"]:
            raise ConfigError("sweep.alphas must be non-empty")
        if any(a < 0 for a in r["sweep"]["alphas"]):
            raise ConfigError("sweep.alphas must be non-negative")
        if not r["sweep"]["seeds"]:
            raise ConfigError("sweep.seeds must be non-empty")
        if r["gradcheck"]["seeds"] < 1:
            raise ConfigError("gradcheck.seeds must be >= 1")
        return self

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)
