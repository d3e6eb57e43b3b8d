"""Experiment configuration: YAML loading, strict validation, hashing.

A single config file drives the whole pipeline (generate, train, evaluate,
control). Unknown keys are rejected anywhere in the tree; plant parameter
overrides are checked against the simulator parameter sets. All randomness
flows from the named seeds in the file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

import yaml

from .filters import derivative_estimator
from .kernels import FeatureMapSpec
from .plants import BBParams, FPParams

MODEL_KINDS = ("pi", "pidf", "npdf", "spdf", "rbf_deriv")
REPRESENTATIONS = ("derivative_free", "derivative_based")
FILTER_KINDS = ("lowpass", "kalman", "savgol")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def default_config(plant_kind: str) -> dict:
    if plant_kind == "bb":
        return {
            "name": "bb-default",
            "seed": 0,
            "plant": {"kind": "bb", "noise": True, "params": {}},
            "excitation": {
                "n_sinusoids": 10,
                "freq_low_hz": 0.0,
                "freq_high_hz": 10.0,
                "amplitude": 0.0872664625997165,  # 5 degrees
                "duration_s": 180.0,
                "test": {"duration_s": 180.0, "freq_high_hz": 10.0},
            },
            "state": {
                "kp": 4,
                "representation": "derivative_free",
                "filter": {"kind": "savgol"},
            },
            "model": {
                "kinds": ["spdf"],
                "max_train_points": 600,
                "feature_map": None,
            },
            "training": {
                "optimizer": "gd",
                "learning_rate": 0.05,
                "minibatch": 256,
                "max_iters": 150,
                "tol": 1e-9,
                "seed": 0,
            },
            "evaluation": {
                "n_sim": 200,
                "window": 100,
                "confidence": 0.99,
                "seed": 0,
                "checkpoints_s": [],
                "max_test_points": 4000,
            },
            "control": {
                "model": "spdf",
                "horizon": 100,
                "max_iters": 60,
                "target": 0.1,
                "position_weight": 200.0,
                "velocity_weight": 60.0,
                "control_weight": 20.0,
                "terminal_scale": 100.0,
                "u_min": -0.25,
                "u_max": 0.25,
                "closed_loop": False,
            },
        }
    if plant_kind == "fp":
        return {
            "name": "fp-default",
            "seed": 0,
            "plant": {"kind": "fp", "noise": True, "params": {}},
            "excitation": {
                "n_sinusoids": 30,
                "freq_low_hz": 0.0,
                "freq_high_hz": 1.3528,   # 8.5 rad/s
                "amplitude": 1.8,
                "duration_s": 106.5,      # ~15,000 samples at the control rate
                "test": {"duration_s": 142.0, "freq_high_hz": 2.3873},  # 15 rad/s
            },
            "state": {
                "kp": 15,
                "representation": "derivative_free",
                "filter": {"kind": "savgol"},
            },
            "model": {
                "kinds": ["spdf"],
                "max_train_points": 800,
                "feature_map": None,
            },
            "training": {
                "optimizer": "gd",
                "learning_rate": 0.05,
                "minibatch": 256,
                "max_iters": 150,
                "tol": 1e-9,
                "seed": 0,
            },
            "evaluation": {
                "n_sim": 200,
                "window": 100,
                "confidence": 0.99,
                "seed": 0,
                "checkpoints_s": [],
                "max_test_points": 4000,
            },
            "control": {
                "model": "spdf",
                "horizon": 400,
                "max_iters": 40,
                "target": 0.0,
                "position_weight": 2.0,
                "velocity_weight": 6.0,
                "control_weight": 0.5,
                "terminal_scale": 60.0,
                "u_min": -2.5,
                "u_max": 2.5,
                "closed_loop": False,
            },
        }
    raise ConfigError(f"unknown plant kind {plant_kind!r} (expected 'bb' or 'fp')")


_PLANT_PARAM_FIELDS = {
    "bb": {f.name for f in dataclasses.fields(BBParams)},
    "fp": {f.name for f in dataclasses.fields(FPParams)},
}


# mappings whose keys are validated downstream (plant parameter names by the
# simulator parameter sets, filter parameters by the estimator factory)
_OPEN_MAPPINGS = {"config.plant.params", "config.state.filter"}


def _merge(default, user, path):
    if isinstance(default, dict):
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: expected a mapping")
        if path in _OPEN_MAPPINGS:
            merged = dict(default)
            merged.update(user)
            return merged
        unknown = set(user) - set(default)
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        out = {}
        for key, dval in default.items():
            if key in user:
                out[key] = _merge(dval, user[key], f"{path}.{key}")
            else:
                out[key] = dval
        return out
    if isinstance(default, bool):
        if not isinstance(user, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return user
    if isinstance(default, (int, float)) and default is not None:
        if not isinstance(user, (int, float)) or isinstance(user, bool):
            raise ConfigError(f"{path}: expected a number")
        return type(default)(user) if isinstance(default, float) else user
    if isinstance(default, str):
        if not isinstance(user, str):
            raise ConfigError(f"{path}: expected a string")
        return user
    # lists and None-able leaves pass through as given
    return user


def validate_config(cfg: dict) -> dict:
    """Cross-field checks beyond the structural merge."""
    plant = cfg["plant"]
    kind = plant["kind"]
    if kind not in ("bb", "fp"):
        raise ConfigError(f"plant.kind: unknown plant {kind!r}")
    params = plant.get("params") or {}
    unknown = set(params) - _PLANT_PARAM_FIELDS[kind]
    if unknown:
        raise ConfigError(f"plant.params: unknown parameters {sorted(unknown)}")
    for mk in cfg["model"]["kinds"]:
        if mk not in MODEL_KINDS:
            raise ConfigError(f"model.kinds: unknown model kind {mk!r}")
    rep = cfg["state"]["representation"]
    if rep not in REPRESENTATIONS:
        raise ConfigError(f"state.representation: unknown representation {rep!r}")
    for mk in cfg["model"]["kinds"]:
        needs_deriv = mk in ("pi", "rbf_deriv")
        if needs_deriv and rep != "derivative_based":
            raise ConfigError(
                f"model kind {mk!r} requires state.representation=derivative_based"
            )
        if not needs_deriv and rep != "derivative_free":
            raise ConfigError(
                f"model kind {mk!r} requires state.representation=derivative_free"
            )
    if rep == "derivative_based":
        fcfg = dict(cfg["state"]["filter"] or {})
        fk = fcfg.pop("kind", None)
        if fk not in FILTER_KINDS:
            raise ConfigError(f"state.filter.kind: unknown filter {fk!r}")
        try:
            derivative_estimator(fk, **fcfg)
        except (ValueError, TypeError) as err:
            raise ConfigError(f"state.filter: {err}") from err
    if cfg["control"]["model"] not in cfg["model"]["kinds"]:
        raise ConfigError(
            f"control.model {cfg['control']['model']!r} is not among model.kinds"
        )
    if cfg["model"]["feature_map"] is not None:
        try:
            FeatureMapSpec.from_config(cfg["model"]["feature_map"])
        except (ValueError, KeyError, TypeError) as err:
            raise ConfigError(f"model.feature_map: {err}") from err
    if cfg["state"]["kp"] < 0:
        raise ConfigError("state.kp must be non-negative")
    return cfg


def resolve_config(user: dict) -> dict:
    if not isinstance(user, dict):
        raise ConfigError("config root must be a mapping")
    kind = (user.get("plant") or {}).get("kind")
    if kind is None:
        raise ConfigError("plant.kind is required")
    merged = _merge(default_config(kind), user, "config")
    return validate_config(merged)


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        user = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: invalid YAML ({err})") from err
    return resolve_config(user or {})


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]


def plant_params(cfg: dict):
    kind = cfg["plant"]["kind"]
    cls = BBParams if kind == "bb" else FPParams
    return cls(**(cfg["plant"].get("params") or {}))
