"""Fully-connected network parameters and forward passes.

Two forward paths share the same arithmetic: a plain numpy path for bulk
inference and a traced path (on :class:`~ganuq.ndmath.tensor.Tensor`) for
training. Optional per-layer dropout masks multiply the hidden activations
in both paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, add, leaky_relu, matmul, mul, relu

ACTIVATIONS = ("relu", "leaky_relu", "linear")
LEAKY_SLOPE = 0.05


class DimensionError(Exception):
    pass


@dataclass
class Layer:
    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class MlpParams:
    layers: list[Layer]
    input_dim: int
    output_dim: int
    seed: int | None = None

    def __post_init__(self):
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            fan_in, fan_out = layer.weight.shape
            if fan_in != prev or layer.bias.shape != (fan_out,):
                raise DimensionError(f"layer {i} does not chain: {layer.weight.shape}")
            prev = fan_out
        if prev != self.output_dim:
            raise DimensionError(
                f"last layer width {prev} != output_dim {self.output_dim}"
            )

    @property
    def hidden_widths(self):
        return [layer.weight.shape[1] for layer in self.layers[:-1]]

    def copy(self):
        return MlpParams(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers],
            self.input_dim,
            self.output_dim,
            self.seed,
        )

    def flat_arrays(self):
        """Parameter arrays in a fixed order (W0, b0, W1, b1, ...)."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def set_flat_arrays(self, arrays):
        it = iter(arrays)
        for layer in self.layers:
            layer.weight = next(it)
            layer.bias = next(it)


def init_mlp(input_dim, hidden, output_dim, rng, activation="leaky_relu", seed=None):
    """He-initialised MLP; hidden layers use `activation`, the head is linear."""
    dims = [input_dim] + list(hidden) + [output_dim]
    layers = []
    for i in range(len(dims) - 1):
        fan_in, fan_out = dims[i], dims[i + 1]
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        b = np.zeros(fan_out)
        act = activation if i < len(dims) - 2 else "linear"
        layers.append(Layer(w, b, act))
    return MlpParams(layers, input_dim, output_dim, seed=seed)


def _activate_np(x, tag):
    if tag == "relu":
        return np.maximum(x, 0.0)
    if tag == "leaky_relu":
        return np.where(x > 0.0, x, LEAKY_SLOPE * x)
    return x


def mlp_forward(params, x, masks=None):
    """Numpy forward pass; `masks` maps hidden-layer index -> scaled mask row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise DimensionError(
            f"input width {x.shape} incompatible with input_dim {params.input_dim}"
        )
    for i, layer in enumerate(params.layers):
        x = x @ layer.weight + layer.bias
        x = _activate_np(x, layer.activation)
        if masks is not None and i in masks:
            x = x * masks[i]
    return x


def param_leaves(params):
    """Fresh gradient leaves sharing the parameter arrays."""
    return [Tensor(a, requires_grad=True) for a in params.flat_arrays()]


def mlp_forward_traced(params, leaves, x, masks=None):
    """Traced forward pass through the given parameter leaves."""
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != params.input_dim:
        raise DimensionError(
            f"input width {x.data.shape} incompatible with input_dim {params.input_dim}"
        )
    for i, layer in enumerate(params.layers):
        w, b = leaves[2 * i], leaves[2 * i + 1]
        x = add(matmul(x, w), b)
        if layer.activation == "relu":
            x = relu(x)
        elif layer.activation == "leaky_relu":
            x = leaky_relu(x, LEAKY_SLOPE)
        if masks is not None and i in masks:
            x = mul(x, Tensor(masks[i]))
    return x
