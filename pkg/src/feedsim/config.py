"""Service configuration: defaults, optionally overridden by the JSON file
named in FEEDSIM_CONFIG. Unknown keys are rejected so typos surface early."""

from __future__ import annotations

import json
import os
from pathlib import Path

from .safety import WatchdogConfig

ENV_VAR = "FEEDSIM_CONFIG"

DEFAULTS = {
    "heartbeat_period": 0.1,
    "staleness_limit": 0.5,
    "receiver_timeout": 0.3,
    "gate_f_max": 4.0,
    "gate_tau_max": 4.0,
    "speed_scale": 1.0,
    "transfer_mode": "in_mouth",
    "outside_distance": 0.05,
    "violation_log": None,
    "bandit_checkpoint": None,
}


class ConfigError(ValueError):
    pass


def load_config(path=None) -> dict:
    cfg = dict(DEFAULTS)
    path = path or os.environ.get(ENV_VAR)
    if path:
        try:
            overrides = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        unknown = set(overrides) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(overrides)
    return cfg


def watchdog_config(cfg: dict) -> WatchdogConfig:
    return WatchdogConfig(heartbeat_period=cfg["heartbeat_period"],
                          staleness_limit=cfg["staleness_limit"],
                          receiver_timeout=cfg["receiver_timeout"])
