"""Run configuration: one nested JSON document, validated on load."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .blend import BlendConfig
from .distill import LR_FLOOR, DistillConfig
from .errors import MDDError
from .losses import LossConfig
from .train import Architecture


class ConfigError(MDDError, ValueError):
    pass


# Desk-scale defaults. The reference-scale settings are 20 trajectories of
# 10 epochs at lr 0.1 and outer rates of 100 / 100 / 10 for reps / reps / labels.
DEFAULTS = {
    "seed": 0,
    "precision": "f64",
    "data": {
        "train_file": None,
        "test_file": None,
        "n_train": 2000,
        "n_test": 500,
        "d": 32,
        "clusters": 20,
        "intra_noise": 0.3,
        "cross_noise": 0.1,
        "seed": 7,
    },
    "model": {
        "mode": "symmetric",
        "d_emb": 64,
        "encoder": "identity",
        "hidden": 128,
        "encoder_seed": 0,
    },
    "buffer": {
        "trajectories": 5,
        "epochs": 6,
        "batch_size": 128,
        "lr": 1.0,
    },
    "distill": {
        "iterations": 2000,
        "syn_steps": 8,
        "expert_epochs": 1,
        "max_start_epoch": 2,
        "mini_batch_size": 20,
        "n_syn": 20,
        "lr_img_data": 0.3,
        "lr_txt_data": 0.3,
        "lr_sim": 0.01,
        "lr_lr": 0.01,
        "momentum": 0.5,
        "label_mode": "lowrank",
        "sim_rank": 10,
        "sim_alpha": 3.0,
        "noise_lambda": 0.0,
    },
    "loss": {"gamma": 0.5, "beta": 0.5, "kind": "wbce"},
    "blend": {"alpha": 1.0, "enabled": True},
    "eval": {"epochs": 50, "lr": None},
    "noise": {"lambdas": [0.0, 0.01, 0.05, 0.1, 0.5, 1.0], "seeds": 5, "iterations": 300},
}

_TYPES = {bool: (bool,), int: (int,), float: (int, float), str: (str,)}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        default = base[key]
        if isinstance(default, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = _merge(default, val, where + ".")
        elif default is None or val is None:
            out[key] = val
        elif isinstance(default, list):
            if not isinstance(val, list):
                raise ConfigError(f"config key {where!r} must be a list")
            out[key] = list(val)
        else:
            allowed = _TYPES[type(default)]
            if isinstance(val, bool) and type(default) is not bool:
                raise ConfigError(f"config key {where!r} must be a number, got a boolean")
            if not isinstance(val, allowed):
                raise ConfigError(f"config key {where!r} must be {type(default).__name__}, got {type(val).__name__}")
            out[key] = float(val) if type(default) is float else val
    return out


class RunConfig:
    """Resolved configuration; ``doc`` is the full nested dictionary."""

    def __init__(self, overrides: dict | None = None):
        self.doc = _merge(DEFAULTS, overrides or {})
        self.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        return cls(doc)

    def __getitem__(self, key):
        return self.doc[key]

    def set(self, dotted: str, value) -> None:
        node = self.doc
        *parents, last = dotted.split(".")
        for p in parents:
            node = node[p]
        node[last] = value
        self.validate()

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True) + "\n"

    def validate(self) -> None:
        try:
            self.loss_config()
            self.blend_config()
            self.distill_config()
            self.architecture()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc
        b = self.doc["buffer"]
        if b["trajectories"] < 1 or b["epochs"] < 1 or b["batch_size"] < 1:
            raise ConfigError("buffer.trajectories, buffer.epochs and buffer.batch_size must be >= 1")
        if not b["lr"] >= 0:
            raise ConfigError("buffer.lr must be >= 0")
        d = self.doc["distill"]
        if d["expert_epochs"] + d["max_start_epoch"] > b["epochs"]:
            raise ConfigError(
                "distill.max_start_epoch + distill.expert_epochs exceeds buffer.epochs"
            )
        e = self.doc["eval"]
        if e["epochs"] < 0:
            raise ConfigError("eval.epochs must be >= 0")
        if e["lr"] is not None and not (isinstance(e["lr"], (int, float)) and e["lr"] > 0):
            raise ConfigError("eval.lr must be null or a positive number")
        if self.doc["noise"]["seeds"] < 1 or self.doc["noise"]["iterations"] < 0:
            raise ConfigError("noise.seeds must be >= 1 and noise.iterations >= 0")
        for lam in self.doc["noise"]["lambdas"]:
            if not isinstance(lam, (int, float)) or not 0 <= lam <= 1:
                raise ConfigError(f"noise.lambdas entries must lie in [0, 1], got {lam!r}")
        data = self.doc["data"]
        if (data["train_file"] is None) != (data["test_file"] is None):
            raise ConfigError("data.train_file and data.test_file must be given together")

    def loss_config(self) -> LossConfig:
        return LossConfig(**self.doc["loss"])

    def blend_config(self) -> BlendConfig:
        return BlendConfig(**self.doc["blend"])

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            **self.doc["distill"],
            lr_teacher=max(self.doc["buffer"]["lr"], LR_FLOOR),
            seed=self.doc["seed"],
            loss=self.loss_config(),
            blend=self.blend_config(),
            precision=self.doc["precision"],
        )

    def architecture(self, d_img: int | None = None, d_txt: int | None = None) -> Architecture:
        m = self.doc["model"]
        d = self.doc["data"]["d"]
        return Architecture.build(
            m["mode"], d_img or d, d_txt or d, m["d_emb"], m["encoder"], m["hidden"], m["encoder_seed"]
        )
