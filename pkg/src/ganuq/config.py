"""Run configuration: one JSON document drives every CLI command.

The schema rejects unknown keys so typos fail loudly; defaults are expanded
before a run and the resolved copy is written next to the artifacts, making
(resolved config, seed) sufficient to replay any run.
"""

from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

from .data import ConfigError

_GAN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "batch_size": {"type": "integer", "minimum": 1},
        "gen_steps": {"type": "integer", "minimum": 0},
        "critic_steps": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "critic_lr": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "beta1": {"type": "number"},
        "beta2": {"type": "number"},
        "gp_weight": {"type": "number", "minimum": 0},
        "d_noise": {"type": "integer", "minimum": 1},
        "gen_hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "critic_hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "critic_out": {"type": "integer", "minimum": 2},
        "activation": {"enum": ["relu", "leaky_relu"]},
    },
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "model"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": ["string", "null"]},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "csv"]},
                "csv_path": {"type": ["string", "null"]},
                "n": {"type": "integer", "minimum": 1},
                "c": {"type": "integer", "minimum": 1},
                "k": {"type": "integer", "minimum": 1},
                "split": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "kind": {"enum": ["uniform", "bands"]},
                        "train_fraction": {
                            "type": "number",
                            "exclusiveMinimum": 0,
                            "exclusiveMaximum": 1,
                        },
                        "n_test_bands": {"type": "integer", "minimum": 1},
                        "n_train_bands": {"type": "integer", "minimum": 1},
                        "direction": {
                            "type": ["array", "null"],
                            "items": {"type": "number"},
                        },
                    },
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "method": {"enum": ["ensemble", "mcdropout"]},
                "n_members": {"type": "integer", "minimum": 2},
                "gan": _GAN_SCHEMA,
                "schedule": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "alpha_initial": {"type": "number", "minimum": 0},
                        "phase1_steps": {"type": "integer", "minimum": 0},
                        "phase3_steps": {"type": "integer", "minimum": 0},
                    },
                },
                "dropout": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "p": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                        "k": {"type": "integer", "minimum": 1},
                        "n_masks": {"type": "integer", "minimum": 2},
                    },
                },
            },
        },
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "n_conditions": {"type": "integer", "minimum": 1},
                "regressor": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "hidden": {
                            "type": "array",
                            "items": {"type": "integer", "minimum": 1},
                        },
                        "lr": {"type": "number", "exclusiveMinimum": 0},
                        "batch_size": {"type": "integer", "minimum": 1},
                        "epochs": {"type": "integer", "minimum": 1},
                    },
                },
                "grid_check": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "enabled": {"type": "boolean"},
                        "n_points": {"type": "integer", "minimum": 1},
                        "n_mc": {"type": "integer", "minimum": 100},
                    },
                },
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "thresholds": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["signal", "score_index"],
                        "properties": {
                            "signal": {"type": "string"},
                            "score_index": {"type": "integer", "minimum": 0},
                            "target_efficiency": {
                                "type": "number",
                                "exclusiveMinimum": 0,
                                "exclusiveMaximum": 1,
                            },
                        },
                    },
                },
                "binning": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "feature": {"type": "integer", "minimum": 0},
                        "n_bins": {"type": "integer", "minimum": 1},
                    },
                },
                "n_per_band": {"type": "integer", "minimum": 1},
                "use_sigma_syst": {"type": "boolean"},
            },
        },
    },
}

DEFAULTS = {
    "seed": 0,
    "output": None,
    "data": {
        "source": "synthetic",
        "csv_path": None,
        "n": 20000,
        "c": 3,
        "k": 5,
        "split": {
            "kind": "uniform",
            "train_fraction": 0.644,
            "n_test_bands": 10,
            "n_train_bands": 1,
            "direction": None,
        },
    },
    "model": {
        "method": "ensemble",
        "n_members": 5,
        "gan": {
            "batch_size": 512,
            "gen_steps": 1000,
            "critic_steps": 3,
            "lr": 1e-4,
            "critic_lr": None,
            "beta1": 0.5,
            "beta2": 0.9,
            "gp_weight": 10.0,
            "d_noise": 64,
            "gen_hidden": [128] * 5,
            "critic_hidden": [128] * 5,
            "critic_out": 64,
            "activation": "leaky_relu",
        },
        "schedule": {"alpha_initial": 10.0, "phase1_steps": 500, "phase3_steps": 500},
        "dropout": {"p": 0.05, "k": 3, "n_masks": 10},
    },
    "distill": {
        "enabled": True,
        "n_conditions": 20000,
        "regressor": {"hidden": [64, 64], "lr": 1e-3, "batch_size": 256, "epochs": 60},
        "grid_check": {"enabled": False, "n_points": 5, "n_mc": 20000},
    },
    "eval": {
        "thresholds": [{"signal": "sig_0", "score_index": 0, "target_efficiency": 0.9}],
        "binning": {"feature": 1, "n_bins": 10},
        "n_per_band": 101917,
        "use_sigma_syst": False,
    },
}


def _merge(defaults, override):
    """Recursive dict merge; override wins, defaults fill gaps."""
    out = copy.deepcopy(defaults)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def resolve_config(raw):
    """Validate a raw config document and expand defaults."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {path}: {exc.message}") from None
    resolved = _merge(DEFAULTS, raw)
    thresholds = resolved["eval"]["thresholds"]
    resolved["eval"]["thresholds"] = [
        _merge({"target_efficiency": 0.9}, t) for t in thresholds
    ]
    if resolved["data"]["source"] == "csv" and not resolved["data"]["csv_path"]:
        raise ConfigError("data.source is 'csv' but data.csv_path is not set")
    return resolved


def load_config(path, seed=None, output=None):
    """Read, validate and resolve a config file; flags override in place."""
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    resolved = resolve_config(raw)
    if seed is not None:
        resolved["seed"] = seed
    if output is not None:
        resolved["output"] = str(output)
    return resolved


def portable_config(resolved):
    """Resolved config without the machine-local output path, suitable for
    persisting and hashing."""
    out = copy.deepcopy(resolved)
    out.pop("output", None)
    return out


def config_hash(resolved):
    """Stable content hash of a resolved config (output path excluded)."""
    blob = json.dumps(portable_config(resolved), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
