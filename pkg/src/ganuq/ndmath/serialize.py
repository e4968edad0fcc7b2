"""Versioned JSON serialization for MLP parameters.

Floats are emitted through Python's shortest round-trip repr (what `json`
uses natively), so save -> load is bit-exact for doubles.
"""

from __future__ import annotations

import json

import numpy as np

from .nn import Layer, MlpParams

FORMAT = "ganuq-mlp"
VERSION = 1


class SerializationError(Exception):
    pass


def mlp_to_dict(params):
    return {
        "format": FORMAT,
        "version": VERSION,
        "input_dim": params.input_dim,
        "output_dim": params.output_dim,
        "seed": params.seed,
        "layers": [
            {
                "activation": layer.activation,
                "weight": layer.weight.tolist(),  # row-major nested lists
                "bias": layer.bias.tolist(),
            }
            for layer in params.layers
        ],
    }


def mlp_from_dict(doc):
    if doc.get("format") != FORMAT:
        raise SerializationError(f"unexpected format tag {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise SerializationError(f"unsupported version {doc.get('version')!r}")
    layers = [
        Layer(
            np.array(ld["weight"], dtype=np.float64),
            np.array(ld["bias"], dtype=np.float64),
            ld["activation"],
        )
        for ld in doc["layers"]
    ]
    return MlpParams(layers, doc["input_dim"], doc["output_dim"], seed=doc.get("seed"))


def dump_json(doc, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_mlp(params, path):
    dump_json(mlp_to_dict(params), path)


def load_mlp(path):
    return mlp_from_dict(load_json(path))
