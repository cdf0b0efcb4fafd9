"""YAML experiment configuration: defaults, validation and resolution.

A resolved configuration contains every number used by a run, so the
manifest written next to the outputs is itself a valid configuration.
"""
from __future__ import annotations

import copy
import re
from dataclasses import fields
from pathlib import Path
from typing import Any

import yaml

from .params import DeviceParams, ParameterError, table1, table2


class ConfigError(ValueError):
    """Invalid configuration; ``key`` is the dotted path of the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


ROD_JV = {"L_cell": 150e-9, "L_elec": 50e-9, "L_R": 79e-9, "W_R": 6.25e-9,
            "n_rods": 4, "alpha_deg": 90.0, "target_h": 1.5625e-9}
ROD_DENSITY = {"L_cell": 150e-9, "L_elec": 440e-9, "L_R": 79e-9, "W_R": 55e-9,
               "n_rods": 4, "alpha_deg": 90.0, "target_h": 2.5e-9}
LINE_MESH = {"length": 100e-9, "interface_position": 50e-9, "n_elements": 400,
             "slab_elements": 16}
SOLVER = {"tol": 1e-6, "max_iter": 60}
BIAS = {"start": 0.0, "stop": 1.0, "step": 0.05, "flat_band": 0.6, "fine_step": 0.005,
        "fine_window": 0.05}

DEFAULTS: dict[str, dict[str, Any]] = {
    "micro_macro_1d": {
        "params": {"preset": "table1", "Q": 1e25},
        "V_appl": 0.0,
        "H_values": [0.125e-9, 0.25e-9, 0.5e-9, 1e-9, 2e-9],
        "mesh": LINE_MESH,
        "solver": SOLVER,
    },
    "transient_1d": {
        "params": {"preset": "table1", "Q": 1e25},
        "H": 0.25e-9,
        "V_values": [0.0, 0.6],
        "k_diss0_values": [1e7, 2e5],
        "t_end": 1e-3,
        "rtol": 1e-3,
        "dt0": 1e-14,
        "samples": {"t_min": 1e-13, "count": 60},
        "mesh": {"length": 100e-9, "interface_position": 50e-9, "n_elements": 200,
                 "slab_elements": 8},
    },
    "jv_rods": {
        "params": {"preset": "table2"},
        "geometry": ROD_JV,
        "models": ["A", "B", "C"],
        "Q_values": [1.53e23, 1.53e25],
        "bias": BIAS,
        "solver": SOLVER,
    },
    "density_fields": {
        "params": {"preset": "table2", "Q": 1.53e25},
        "geometry": ROD_DENSITY,
        "models": ["A", "B", "C"],
        "V_appl": 0.0,
        "solver": SOLVER,
    },
    "voc_jsc_vs_q": {
        "params": {"preset": "table2"},
        "geometry": ROD_JV,
        "models": ["A", "B", "C"],
        "Q_values": [1.53 * 10.0 ** k for k in range(20, 31)],
        "v_step": 0.05,
        "solver": SOLVER,
    },
    "interface_length_sweep": {
        "params": {"preset": "table2", "Q": 1.53e25},
        "geometry": {"L_cell": 150e-9, "L_elec": 150e-9, "L_R": 75e-9, "target_h": 1.5625e-9},
        "W_R_values": [75e-9, 37.5e-9, 18.75e-9, 12.5e-9, 9.375e-9, 7.5e-9, 6.25e-9],
        "biplanar": True,
        "models": ["A", "B", "C"],
        "solver": SOLVER,
    },
    "angle_sweep": {
        "params": {"preset": "table2", "Q": 1.53e25},
        "geometry": {"L_cell": 150e-9, "L_elec": 150e-9, "L_R": 75e-9, "W_R": 18.75e-9,
                     "n_rods": 4, "target_h": 1.5625e-9},
        "alpha_values": [90.0, 86.0, 83.0, 80.0, 77.0 + 11.0 / 60.0],
        "models": ["A", "B", "C"],
        "solver": SOLVER,
    },
    "complex_morphology": {
        "params": {"preset": "table2", "Q": 1.53e25},
        "morphology": {"size": 150e-9, "n": 60, "seed": 18, "correlation": 2.0, "bias": 1.0},
        "models": ["A", "B", "C"],
        "bias": BIAS,
        "solver": SOLVER,
    },
    "kdiss_table": {
        "params": {"preset": "table2", "T": 300.0, "eps_r_a": 4.0, "eps_r_d": 4.0},
        "E_max": 1e8,
        "E_count": 41,
        "angles_deg": [0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0],
    },
}

KINDS = tuple(DEFAULTS)
_PRESETS = {"table1", "table2", "default"}
_PARAM_FIELDS = {f.name: f for f in fields(DeviceParams)}


def _merge(default: Any, given: Any, key: str) -> Any:
    """Deep merge ``given`` over ``default`` with type checks against the default."""
    if isinstance(default, dict):
        if not isinstance(given, dict):
            raise ConfigError(key, f"expected a mapping, got {type(given).__name__}")
        out = copy.deepcopy(default)
        for k, v in given.items():
            sub = f"{key}.{k}" if key else str(k)
            if k not in default:
                raise ConfigError(sub, "unknown key")
            out[k] = _merge(default[k], v, sub)
        return out
    if isinstance(default, bool):
        if not isinstance(given, bool):
            raise ConfigError(key, "expected a boolean")
        return given
    if isinstance(default, (int, float)):
        if isinstance(given, bool) or not isinstance(given, (int, float)):
            raise ConfigError(key, f"expected a number, got {given!r}")
        if isinstance(default, int) and not isinstance(default, bool) and not isinstance(given, int):
            if float(given) != int(given):
                raise ConfigError(key, "expected an integer")
            return int(given)
        return type(default)(given) if isinstance(default, float) else given
    if isinstance(default, list):
        if not isinstance(given, list) or not given:
            raise ConfigError(key, "expected a nonempty list")
        proto = default[0]
        return [_merge(proto, v, f"{key}[{i}]") for i, v in enumerate(given)]
    if isinstance(default, str):
        if not isinstance(given, str):
            raise ConfigError(key, "expected a string")
        return given
    return given


def _resolve_params(spec: dict, key: str = "params") -> dict:
    spec = dict(spec)
    preset = spec.pop("preset", "default")
    if preset not in _PRESETS:
        raise ConfigError(f"{key}.preset", f"unknown preset {preset!r}")
    if preset == "table1":
        base = table1(V_appl=0.0)
    elif preset == "table2":
        base = table2()
    else:
        base = DeviceParams()
    for k in spec:
        if k not in _PARAM_FIELDS:
            raise ConfigError(f"{key}.{k}", "unknown device parameter")
    try:
        prm = DeviceParams.from_mapping(spec, base=base)
    except ParameterError as exc:
        raise ConfigError(key, str(exc)) from exc
    return {"preset": preset, **prm.to_dict()}


def device_params(resolved_params: dict, **overrides) -> DeviceParams:
    """Build :class:`DeviceParams` from a resolved ``params`` section."""
    data = {k: v for k, v in resolved_params.items() if k != "preset"}
    data.update(overrides)
    return DeviceParams(**data)


def resolve(config: dict) -> dict:
    """Fill defaults and validate; raises :class:`ConfigError` with key paths."""
    if not isinstance(config, dict):
        raise ConfigError("", "configuration must be a mapping")
    config = {k: v for k, v in config.items() if k != "provenance"}
    kind = config.get("kind")
    if kind not in DEFAULTS:
        raise ConfigError("kind", f"expected one of {', '.join(KINDS)}, got {kind!r}")
    defaults = DEFAULTS[kind]
    body = {k: v for k, v in config.items() if k not in ("kind", "params")}
    merged = _merge({k: v for k, v in defaults.items() if k != "params"}, body, "")
    params = dict(defaults["params"])
    given = config.get("params", {})
    if not isinstance(given, dict):
        raise ConfigError("params", "expected a mapping")
    if given.get("preset", params["preset"]) != params["preset"]:
        # a different preset discards the preset-specific defaults
        params = {}
    params.update(given)
    out = {"kind": kind, "params": _resolve_params(params)}
    out.update(merged)
    _check_ranges(out)
    return out


def _check_ranges(cfg: dict) -> None:
    for key in ("H_values", "Q_values", "W_R_values"):
        for i, v in enumerate(cfg.get(key, [])):
            if v <= 0:
                raise ConfigError(f"{key}[{i}]", "must be positive")
    for i, m in enumerate(cfg.get("models", [])):
        if m not in ("A", "B", "C"):
            raise ConfigError(f"models[{i}]", f"unknown dissociation model {m!r}")
    for sec in ("geometry", "mesh", "morphology"):
        for k, v in cfg.get(sec, {}).items():
            if isinstance(v, (int, float)) and v <= 0 and k not in ("alpha_deg", "bias"):
                raise ConfigError(f"{sec}.{k}", "must be positive")
    if "solver" in cfg and cfg["solver"]["tol"] <= 0:
        raise ConfigError("solver.tol", "must be positive")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e25`` and ``1.53e23`` as floats (YAML 1.2 rule)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)(?:[eE][-+]?[0-9]+)?$
                   |^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$""", re.X),
    list("-+0123456789."))


def load_config(path) -> dict:
    """Read a YAML file (an experiment config or a run manifest) and resolve it."""
    text = Path(path).read_text()
    try:
        data = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"YAML parse error: {exc}") from exc
    return resolve(data or {})


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
