"""Experiment configuration: defaults, schema validation and YAML round-tripping."""
from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .catalog import CATALOG

# every numeric default lives here
DEFAULTS: dict[str, Any] = {
    "model": {"name": "linear", "params": {"a": 2.0, "mu": 1.0, "kappa": 1.0,
                                           "diffusion": 0.5}},
    "constants": {"mu": 1.0, "K": 0.5, "Kprime": 0.95, "p": 4.0, "C0": 0.0, "C1": 0.0,
                  "C": 0.0, "alpha": 0.0, "L": 0.0, "d": 1, "l": 1},
    "grid": {"h": 1e-2, "T": 2.0, "t_grid": [0.0, 1.0], "x_grid": [[0.0]]},
    "solver": {"M": 10_000, "basis": "polynomial", "degree": 1, "bins": 8,
               "implicit_iterations": 0, "svd_tolerance": 1e-10, "y_bound": 1e6,
               "control_variate": True},
    "environments": 200,
    "epsilon": 1e-3,
    "seed": 0,
    "override_assumptions": False,
    "check": {"probe_samples": 10_000, "box": {"x": [-2.0, 2.0], "y": [-5.0, 5.0],
                                                "z": [-2.0, 2.0]}},
    "forward": {"t": 0.0, "x": [0.5], "horizon": 1.0, "T_mid": 0.5, "r_steps": 10,
                "export_paths": False},
    "solve": {"benchmark": "martingale", "horizon": 1.0, "t": 0.0, "x": [0.3],
              "terminal": {"kind": "zero", "value": 0.0}},
    "doss": {"y_grid": {"min": -6.0, "max": 6.0, "n": 241}, "scheme": "milstein",
             "mollify_window": 0},
    "stationarity": {"t": 0.0, "r_steps": [50], "x": [0.0], "alpha": 0.01,
                     "calibration_runs": 20},
    "bench": {"profile": "full", "criteria": []},
}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_point = {"type": "array", "items": _num, "minItems": 1}
_range = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object", "additionalProperties": False, "required": ["name"],
            "properties": {"name": {"enum": list(CATALOG)}, "params": {"type": "object"}},
        },
        "constants": {
            "type": "object", "additionalProperties": False,
            "properties": {**{k: _num for k in ("mu", "K", "Kprime", "p", "C0", "C1", "C",
                                                 "alpha", "L")},
                           "d": {"type": "integer", "minimum": 1},
                           "l": {"type": "integer", "minimum": 1}},
        },
        "grid": {
            "type": "object", "additionalProperties": False,
            "properties": {"h": _pos, "T": _pos,
                           "t_grid": {"type": "array", "items": _num, "minItems": 1},
                           "x_grid": {"type": "array", "items": _point, "minItems": 1}},
        },
        "solver": {
            "type": "object", "additionalProperties": False,
            "properties": {"M": {"type": "integer", "minimum": 1},
                           "basis": {"enum": ["polynomial", "bins"]},
                           "degree": {"type": "integer", "minimum": 0},
                           "bins": {"type": "integer", "minimum": 1},
                           "implicit_iterations": {"type": "integer", "minimum": 0},
                           "svd_tolerance": _pos, "y_bound": _pos,
                           "control_variate": {"type": "boolean"}},
        },
        "environments": {"type": "integer", "minimum": 1},
        "epsilon": _pos,
        "seed": {"type": "integer", "minimum": 0},
        "override_assumptions": {"type": "boolean"},
        "check": {
            "type": "object", "additionalProperties": False,
            "properties": {"probe_samples": {"type": "integer", "minimum": 1},
                           "box": {"type": "object", "additionalProperties": False,
                                   "properties": {"x": _range, "y": _range, "z": _range}}},
        },
        "forward": {
            "type": "object", "additionalProperties": False,
            "properties": {"t": {"type": "number", "minimum": 0}, "x": _point,
                           "horizon": _pos, "T_mid": {"type": "number", "minimum": 0},
                           "r_steps": {"type": "integer", "minimum": 0},
                           "export_paths": {"type": "boolean"}},
        },
        "solve": {
            "type": "object", "additionalProperties": False,
            "properties": {"benchmark": {"enum": ["martingale", "scalar-ode", "telescoping",
                                                  "none"]},
                           "horizon": _pos, "t": {"type": "number", "minimum": 0},
                           "x": _point,
                           "terminal": {"type": "object", "additionalProperties": False,
                                        "properties": {"kind": {"enum": ["zero", "constant",
                                                                         "identity",
                                                                         "square"]},
                                                       "value": _num}}},
        },
        "doss": {
            "type": "object", "additionalProperties": False,
            "properties": {"y_grid": {"type": "object", "additionalProperties": False,
                                      "properties": {"min": _num, "max": _num,
                                                     "n": {"type": "integer", "minimum": 2}}},
                           "scheme": {"enum": ["euler", "milstein"]},
                           "mollify_window": {"type": "integer", "minimum": 0}},
        },
        "stationarity": {
            "type": "object", "additionalProperties": False,
            "properties": {"t": {"type": "number", "minimum": 0},
                           "r_steps": {"type": "array",
                                       "items": {"type": "integer", "minimum": 0}},
                           "x": _point, "alpha": {"type": "number", "exclusiveMinimum": 0,
                                                  "exclusiveMaximum": 1},
                           "calibration_runs": {"type": "integer", "minimum": 1}},
        },
        "bench": {
            "type": "object", "additionalProperties": False,
            "properties": {"profile": {"enum": ["full", "quick"]},
                           "criteria": {"type": "array",
                                        "items": {"type": "integer", "minimum": 1,
                                                  "maximum": 10}}},
        },
    },
}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending line or field."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "params":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _line_of(node, path) -> int | None:
    """1-based line of the YAML node reached by ``path``, or of the deepest ancestor found."""
    line = node.start_mark.line + 1 if node is not None else None
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = next((v for k, v in node.value if k.value == key), None)
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) \
                and key < len(node.value):
            nxt = node.value[key]
        else:
            nxt = None
        if nxt is None:
            break
        node, line = nxt, nxt.start_mark.line + 1
    return line


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse YAML text, validate it against :data:`SCHEMA` and fill in defaults."""
    try:
        raw = yaml.safe_load(text) or {}
        tree = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(raw),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        path = list(e.absolute_path)
        field = ".".join(map(str, path)) or "<root>"
        raise ConfigError(f"{source}:{_line_of(tree, path)}: field {field}: {e.message}")
    cfg = _merge(DEFAULTS, raw)
    if cfg["constants"]["d"] != len(cfg["grid"]["x_grid"][0]):
        raise ConfigError(f"{source}: field grid.x_grid: points must have d="
                          f"{cfg['constants']['d']} components")
    return cfg


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return copy.deepcopy(DEFAULTS)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def emit_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
