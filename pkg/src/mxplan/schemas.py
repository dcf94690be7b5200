"""JSON schemas for every file the CLI reads or writes."""

from __future__ import annotations

import json
from pathlib import Path

import jsonschema

from .errors import DataError

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_SCHEME_NAME = {"type": "string", "pattern": r"^w\d+a\d+"}

_TILE = {
    "type": "object",
    "required": ["tile_m", "tile_n", "tile_k", "warps", "slice_k"],
    "properties": {k: {"type": "integer", "minimum": 1}
                   for k in ("tile_m", "tile_n", "tile_k", "warps", "slice_k")},
}

_SHAPE = {
    "type": "object",
    "required": ["m", "n", "k"],
    "properties": {k: {"type": "integer", "minimum": 0} for k in ("m", "n", "k")},
}

_BLOCK_ENTRY = {
    "type": "object",
    "required": ["w-act", "w_gsize", "a_gsize", "scheme", "tile", "shape"],
    "properties": {
        "w-act": {"type": "string"},
        "w_gsize": _INT,
        "a_gsize": _INT,
        "scheme": _SCHEME_NAME,
        "tile": _TILE,
        "shape": _SHAPE,
    },
}

SCHEMAS = {
    "sensitivity": {
        "type": "object",
        "required": ["schemes", "delta", "meta"],
        "properties": {
            "schemes": {"type": "array", "items": _SCHEME_NAME, "minItems": 1},
            "delta": {"type": "array", "items": {"type": "array", "items": {
                "type": "array", "items": {"type": "number", "minimum": 0}}}},
            "meta": {"type": "object", "required": ["samples", "seed"],
                     "properties": {"samples": _INT, "seed": _INT}},
        },
    },
    "stats": {
        "type": "object",
        "required": ["num_experts", "top_k", "hidden", "intermediate", "total_tokens",
                     "tokens_per_expert"],
        "properties": {
            "num_experts": {"type": "integer", "minimum": 1},
            "top_k": {"type": "integer", "minimum": 1},
            "hidden": {"type": "integer", "minimum": 1},
            "intermediate": {"type": "integer", "minimum": 1},
            "total_tokens": {"type": "integer", "minimum": 0},
            "tokens_per_expert": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        },
    },
    "hardware": {
        "type": "object",
        "required": ["sm_count", "mem_bw", "smem_per_sm", "peak_flops", "launch_overhead"],
        "properties": {
            "name": {"type": "string"},
            "sm_count": {"type": "integer", "minimum": 1},
            "mem_bw": {"type": "number", "exclusiveMinimum": 0},
            "smem_per_sm": {"type": "integer", "minimum": 1},
            "peak_flops": {"type": "object", "additionalProperties": {
                "type": "number", "exclusiveMinimum": 0}},
            "launch_overhead": {"type": "number", "exclusiveMinimum": 0},
        },
    },
    "tile_costs": {
        "type": "object",
        "required": ["entries"],
        "properties": {"entries": {"type": "array", "items": {
            "type": "object",
            "required": ["scheme", "tile_m", "tile_n", "tile_k", "warps", "k", "cost"],
            "properties": {"scheme": _SCHEME_NAME, "k": _INT,
                           "cost": {"type": "number", "exclusiveMinimum": 0}},
        }}},
    },
    "plan": {
        "type": "object",
        "required": ["schemes", "experts", "predicted", "r", "budget_bytes", "granularity",
                     "sm_count"],
        "properties": {
            "schemes": {"type": "array", "items": _SCHEME_NAME},
            "r": {"type": "number", "minimum": 0, "maximum": 1},
            "budget_bytes": _NUM,
            "granularity": {"enum": ["linear", "expert"]},
            "sm_count": {"type": "integer", "minimum": 1},
            "exact": {"type": "boolean"},
            "predicted": {"type": "object", "required": ["L", "T", "objective", "memory_bytes"],
                          "properties": {k: _NUM for k in ("L", "T", "objective", "memory_bytes")}},
            "experts": {"type": "array", "items": {
                "type": "object",
                "required": ["expert", "gate", "up", "down"],
                "properties": {"expert": _INT, "gate": _BLOCK_ENTRY, "up": _BLOCK_ENTRY,
                               "down": _BLOCK_ENTRY},
            }},
        },
    },
    "schedule": {
        "type": "object",
        "required": ["sm", "makespan"],
        "properties": {
            "makespan": _NUM,
            "sm": {"type": "array", "items": {
                "type": "object", "required": ["tasks"],
                "properties": {"tasks": {"type": "array", "items": {
                    "type": "object", "required": ["owner", "scheme", "cost"],
                    "properties": {
                        "owner": {"type": "array", "items": _INT, "minItems": 2, "maxItems": 2},
                        "scheme": _SCHEME_NAME,
                        "cost": {"type": "number", "exclusiveMinimum": 0},
                    },
                }}},
            }},
        },
    },
}


def validate(data, name: str) -> None:
    try:
        jsonschema.validate(data, SCHEMAS[name])
    except jsonschema.ValidationError as exc:
        raise DataError(f"{name} JSON failed schema validation: {exc.message}") from exc


def dump_json(data, path: str | Path, name: str) -> None:
    validate(data, name)
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def load_json(path: str | Path, name: str):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read {name} file {path}: {exc}") from exc
    validate(data, name)
    return data
