"""Run configuration files: INI-style sections with flat keys.

Sections: [train], [attack], [eval], [data]. Unknown sections or keys
are a hard error that lists every violation. CLI overrides
(section.key=value) take precedence over file values.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .attacks import AttackConfig
from .data import DatasetSpec
from .errors import ConfigError
from .finetune import TrainConfig

_TRAIN_KEYS = {
    "enabled": bool,
    "loss_kind": str,
    "stop_grad": bool,
    "epsilon_train": float,
    "lr_peak": float,
    "weight_decay": float,
    "warmup_steps": int,
    "total_steps": int,
    "epochs": int,
    "batch_size": int,
    "seed": int,
    "optimizer_kind": str,
    "temperature": float,
    "init_checkpoint": str,
    "checkpoint_every": int,
    "inner_steps": int,
    "inner_alpha": float,
    "inner_objective": str,
}

_ATTACK_KEYS = {
    "norm": str,
    "epsilon": float,
    "steps": int,
    "alpha": float,
    "objective": str,
    "seed": int,
    "target": int,
    "random_start": bool,
    "temperature": float,
}

_EVAL_KEYS = {
    "enabled": bool,
    "eps_list": str,  # comma-separated, in 1/255 units or raw floats
    "attack_kind": str,
    "attack_steps": int,
    "attack_subset": int,
    "temperature": float,
    "seed": int,
    "checkpoint": str,
    "targeted": bool,
    "targeted_epsilon": float,
    "targeted_steps": int,
    "targeted_per_target": int,
}

_DATA_KEYS = {
    "source": str,
    "n_samples": int,
    "image_size": int,
    "channels": int,
    "num_classes": int,
    "seed": int,
    "root": str,
    "train_fraction": float,
}

_SECTIONS = {
    "train": _TRAIN_KEYS,
    "attack": _ATTACK_KEYS,
    "eval": _EVAL_KEYS,
    "data": _DATA_KEYS,
}


@dataclass
class RunConfig:
    """Parsed, validated run configuration."""

    train: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "train": self.train,
            "attack": self.attack,
            "eval": self.eval,
            "data": self.data,
        }

    def seed(self) -> int:
        return int(self.train.get("seed", self.data.get("seed", 0)))

    def dataset_spec(self) -> DatasetSpec:
        keys = {k: v for k, v in self.data.items() if k != "train_fraction"}
        return DatasetSpec(**keys)

    def train_config(self) -> TrainConfig:
        kwargs = {
            k: v
            for k, v in self.train.items()
            if k not in ("enabled", "init_checkpoint", "checkpoint_every",
                         "inner_steps", "inner_alpha", "inner_objective")
        }
        config = TrainConfig(**kwargs)
        inner_overrides = {
            "steps": self.train.get("inner_steps"),
            "alpha": self.train.get("inner_alpha"),
            "objective": self.train.get("inner_objective"),
        }
        inner_overrides = {k: v for k, v in inner_overrides.items() if v is not None}
        if self.attack or inner_overrides:
            inner = dict(config.inner_attack.to_dict())
            inner.update(self.attack)
            inner.update(inner_overrides)
            config.inner_attack = AttackConfig.from_dict(inner)
        return config

    def eval_eps_list(self) -> list:
        raw = self.eval.get("eps_list", "2,4,8")
        values = []
        for part in str(raw).split(","):
            part = part.strip()
            if not part:
                continue
            v = float(part)
            values.append(v / 255.0 if v >= 1.0 else v)
        return values


def _coerce(section: str, key: str, raw: str, violations: list):
    kind = _SECTIONS[section][key]
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        violations.append(f"[{section}] {key}: {exc}")
        return None


def parse_config_text(text: str, overrides=None) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.read_string(text)
    violations = []
    sections: dict = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            violations.append(f"unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                violations.append(f"unknown key [{section}] {key}")
                continue
            value = _coerce(section, key, raw, violations)
            if value is not None:
                sections[section][key] = value
    for override in overrides or []:
        try:
            dotted, raw = override.split("=", 1)
            section, key = dotted.split(".", 1)
        except ValueError:
            violations.append(f"malformed override {override!r} (use section.key=value)")
            continue
        if section not in _SECTIONS:
            violations.append(f"unknown section in override [{section}]")
        elif key not in _SECTIONS[section]:
            violations.append(f"unknown key in override [{section}] {key}")
        else:
            value = _coerce(section, key, raw, violations)
            if value is not None:
                sections[section][key] = value
    if violations:
        raise ConfigError(violations)
    return RunConfig(**sections)


def parse_config_file(path, overrides=None) -> RunConfig:
    with open(path) as fh:
        return parse_config_text(fh.read(), overrides=overrides)
