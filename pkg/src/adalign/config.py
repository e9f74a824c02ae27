"""Run configuration: INI sections of typed keys with environment overrides.

Every key has a default below; a config file may set any subset.  Unknown
sections or keys are rejected.  ``HINT_<SECTION>_<KEY>=value`` in the
environment overrides the file (e.g. ``HINT_TRAIN_STAGE2_STEPS=500``).
"""
from __future__ import annotations

import configparser
import copy
import hashlib
import json
import os
from pathlib import Path

from .numerics.tensor import ConfigError

DEFAULTS: dict[str, dict] = {
    "run": {"seed": 0, "n_train": 2000, "n_eval": 200, "workers": 1, "max_rank": 1,
            "max_answer_len": 64},
    "scene": {"min_objects": 1, "max_objects": 12, "x_min": -40.0, "x_max": 40.0,
              "y_min": -30.0, "y_max": 30.0},
    "noise": {"sigma_pos": 0.2, "sigma_vel": 0.1, "sigma_plan": 0.1, "p_drop": 0.02},
    "mixer": {"embed_dim": 64, "n_bev_blocks": 2, "n_instance_blocks": 2, "n_heads": 4,
              "mlp_hidden": 128},
    "decoder": {"n_layers": 8, "dim": 128, "n_heads": 4, "mlp_hidden": 256, "max_len": 128,
                "n_adapter_tokens": 32},
    "schedule": {"strategy": "barbell", "n_front": 2, "n_end": 2},
    "train": {"batch": 32, "stage1_steps": 400, "stage2_steps": 2400, "warmup_steps": 1000,
              "optimizer": "adam", "lr1": 1e-3, "lr2": 1e-3, "momentum": 0.9, "grad_clip": 1.0,
              "dtype": "float32"},
    "mix": {"align": 4.0, "explanation": 1.0, "command": 1.0, "counting": 1.0, "position": 1.0,
            "motion": 1.0, "planning": 1.0},
    "warmup_mix": {"align": 1.0, "explanation": 0.0, "command": 0.0, "counting": 0.0,
                   "position": 1.0, "motion": 1.0, "planning": 0.0},
}
ENV_PREFIX = "HINT_"


def _coerce(section: str, key: str, raw, default):
    try:
        if isinstance(default, bool):
            if isinstance(raw, bool):
                return raw
            s = str(raw).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(str(raw).strip())
        if isinstance(default, float):
            return float(str(raw).strip())
        return str(raw).strip()
    except ValueError:
        raise ConfigError(f"{section}.{key}: cannot read {raw!r} as {type(default).__name__}") from None


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, kv in (values or {}).items():
            for key, raw in kv.items():
                self.set(section, key, raw)

    def set(self, section: str, key: str, raw) -> None:
        if section not in self.values:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        self.values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @classmethod
    def load(cls, path=None, env=None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None)
            parser.optionxform = str
            try:
                text = Path(path).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            try:
                parser.read_string(text, source=str(path))
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc.message.splitlines()[0]}") from None
            for section in parser.sections():
                for key, raw in parser.items(section):
                    cfg.set(section, key, raw)
        cfg.apply_env(os.environ if env is None else env)
        return cfg

    def apply_env(self, env) -> None:
        # longest section names first so "warmup_mix" wins over "warmup"-like prefixes
        sections = sorted(self.values, key=len, reverse=True)
        for name, raw in sorted(env.items()):
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX):].lower()
            for section in sections:
                if rest.startswith(section + "_"):
                    self.set(section, rest[len(section) + 1:], raw)
                    break
            else:
                raise ConfigError(f"environment override {name} names no config section")

    def to_json(self) -> str:
        return json.dumps(self.values, sort_keys=True)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)
