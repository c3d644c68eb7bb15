"""Pipeline configuration: JSON file + per-flag overrides, schema-validated."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import jsonschema

from .errors import PipelineError

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "threads": {"type": "integer", "minimum": 1},
        "tier": {"enum": ["tiny", "small", "default"]},
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ids": {"type": "integer", "minimum": 2},
                "exps": {"type": "integer", "minimum": 1},
                "write_raw": {"type": "boolean"},
                "render_fixtures": {"type": "boolean"},
                "image_size": {"type": "integer", "minimum": 32, "maximum": 2048},
            },
        },
        "nicp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "stiffness_schedule": {
                    "type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                    "minItems": 1,
                },
                "landmark_weight": {"type": "number", "minimum": 0},
                "landmark_decay": {"type": "number", "exclusiveMinimum": 0},
                "max_inner_iterations": {"type": "integer", "minimum": 1},
                "convergence_eps": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "bake": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "resolution": {"enum": [256, 512, 1024, 2048, 4096]},
                "smooth_raw": {"type": "boolean"},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "r_id": {"type": "integer", "minimum": 1},
                "r_exp": {"type": "integer", "minimum": 1},
                "method": {"enum": ["hosvd", "hooi"]},
                "albedo_components": {"type": "integer", "minimum": 1},
                "use_truth_bases": {"type": "boolean"},
            },
        },
        "fit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_pixel": {"type": "number", "minimum": 0},
                "lambda_id": {"type": "number", "minimum": 0},
                "lambda_exp": {"type": "number", "minimum": 0},
                "lambda_alb": {"type": "number", "minimum": 0},
                "max_outer_iterations": {"type": "integer", "minimum": 1},
                "n_id": {"type": "integer", "minimum": 1},
                "n_exp": {"type": "integer", "minimum": 1},
                "n_alb": {"type": "integer", "minimum": 1},
                "pixel_norm": {"enum": ["l2", "squared"]},
            },
        },
        "rig": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mask_resolution": {"type": "integer", "minimum": 16},
                "subdiv": {"type": "integer", "minimum": 0, "maximum": 3},
                "mask_normalize": {"enum": ["per_mask", "global"]},
            },
        },
    },
}

DEFAULTS = {
    "seed": 7,
    "threads": 0,  # 0 = leave the numba default
    "tier": "small",
    "synth": {"ids": 4, "exps": 3, "write_raw": True, "render_fixtures": True, "image_size": 128},
    "nicp": {
        "stiffness_schedule": [50.0, 20.0, 5.0, 2.0, 0.8, 0.5],
        "landmark_weight": 5.0,
        "landmark_decay": 0.5,
        "max_inner_iterations": 10,
        "convergence_eps": 0.05,
    },
    "bake": {"resolution": 512, "smooth_raw": False},
    "model": {"r_id": 5, "r_exp": 3, "method": "hosvd", "albedo_components": 6,
              "use_truth_bases": False},
    "fit": {
        "lambda_pixel": 1e-3, "lambda_id": 1e-2, "lambda_exp": 1e-2, "lambda_alb": 1e-2,
        "max_outer_iterations": 8, "n_id": 50, "n_exp": 52, "n_alb": 100,
        "pixel_norm": "l2",
    },
    "rig": {"mask_resolution": 256, "subdiv": 1, "mask_normalize": "per_mask"},
}


@dataclass
class PipelineConfig:
    data: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.data[key]

    def section(self, name: str) -> dict:
        return self.data[name]

    def to_json(self) -> dict:
        return self.data


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Merge defaults <- config file <- overrides, then validate."""
    data = json.loads(json.dumps(DEFAULTS))  # deep copy
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except FileNotFoundError:
            raise PipelineError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise PipelineError(f"config is not valid json: {exc}") from None
        data = _deep_merge(data, user)
    if overrides:
        data = _deep_merge(data, overrides)
    # threads=0 means "unset"; drop before schema validation
    check = {k: v for k, v in data.items()}
    if check.get("threads", 1) == 0:
        check["threads"] = 1
    try:
        jsonschema.validate(check, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise PipelineError(f"invalid config: {exc.message}") from None
    return PipelineConfig(data)
