"""Pipeline configuration: a single JSON document, validated before any work."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import jsonschema

from .io import InputError
from .normals import DEFAULT_SCHEDULE

_NUM = {"type": "number"}
_NONNEG = {"type": "number", "minimum": 0}

_ATOM = {
    "type": "object",
    "required": ["model"],
    "additionalProperties": False,
    "properties": {
        "model": {"enum": ["lambertian", "ward", "cook-torrance"]},
        "params": {"type": "object"},
        "name": {"type": "string"},
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dictionary": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "parametric": {"oneOf": [{"const": "default"}, {"type": "array", "items": _ATOM}]},
                "merl_dir": {"type": ["string", "null"]},
                "channels": {"enum": [1, 3, None]},
            },
        },
        "schedule": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "search": {"enum": ["c2f", "brute"]},
        "lambda": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"mode": {"enum": ["auto", "relative", "absolute"]}, "value": _NONNEG},
        },
        "noise_sigma": _NONNEG,
        "mask": {"type": ["string", "null"]},
        "output_dir": {"type": ["string", "null"]},
        "threads": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "dark_threshold": _NONNEG,
        "saturation": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "cache_dir": {"type": ["string", "null"]},
        "max_uncertified_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "skip_residual_quantile": {"type": ["number", "null"], "exclusiveMinimum": 0, "maximum": 1},
        "scene": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "shape": {"enum": ["sphere", "checkerboard"]},
                "size": {"type": "integer", "minimum": 4},
                "radius": {"type": "number", "exclusiveMinimum": 0, "maximum": 0.5},
                "materials": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "checker": {"type": "integer", "minimum": 1},
                "lights": {"$ref": "#/definitions/lights"},
            },
        },
        "benchmark": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "q_values": {"type": "array", "items": {"type": "integer", "minimum": 3}, "minItems": 1},
                "normals_per_material": {"type": "integer", "minimum": 1},
                "materials": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
                "leave_one_out": {"type": "boolean"},
                "max_polar_deg": {"type": "number", "exclusiveMinimum": 0, "maximum": 90},
                "lights": {"$ref": "#/definitions/lights"},
            },
        },
    },
    "definitions": {
        "lights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["random", "geodesic"]},
                "count": {"type": "integer", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "min_elevation_deg": {"type": "number", "minimum": 0, "maximum": 90},
            },
        },
    },
}

DEFAULTS: dict[str, Any] = {
    "dictionary": {"parametric": "default", "merl_dir": None, "channels": None},
    "schedule": list(DEFAULT_SCHEDULE),
    "search": "c2f",
    "lambda": {"mode": "auto", "value": 0.0},
    "noise_sigma": 0.0,
    "mask": None,
    "output_dir": None,
    "threads": 1,
    "seed": 0,
    "dark_threshold": 0.0,
    "saturation": None,
    "cache_dir": None,
    "max_uncertified_fraction": 0.01,
    "skip_residual_quantile": None,
    "scene": {"shape": "sphere", "size": 64, "radius": 0.45, "materials": [1], "checker": 8,
              "lights": {"kind": "random", "count": 100, "seed": 1, "min_elevation_deg": 0.0}},
    "benchmark": {"q_values": [10, 25, 50, 100], "normals_per_material": 200, "materials": None,
                  "leave_one_out": True, "max_polar_deg": 90.0,
                  "lights": {"kind": "random", "count": 100, "seed": 1, "min_elevation_deg": 0.0}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class PipelineConfig:
    """Validated settings; `data` is the full document with defaults filled in."""

    data: dict

    @classmethod
    def from_dict(cls, doc: dict | None = None, source: str = "config") -> "PipelineConfig":
        doc = doc or {}
        try:
            jsonschema.validate(doc, CONFIG_SCHEMA)
            full = _merge(DEFAULTS, doc)
            jsonschema.validate(full, CONFIG_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise InputError(f"{source}: {where}: {exc.message}") from exc
        sched = full["schedule"]
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise InputError(f"{source}: schedule must be strictly decreasing, got {sched}")
        return cls(full)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict | None = None) -> "PipelineConfig":
        doc: dict = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise InputError(f"{path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise InputError(f"{path}: top level must be an object")
        return cls.from_dict(_merge(doc, overrides or {}), str(path or "config"))

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        return PipelineConfig.from_dict(_merge(self.data, overrides))

    def __getitem__(self, key: str):
        return self.data[key]

    def to_json(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True)
