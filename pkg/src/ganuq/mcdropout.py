"""Structured MC dropout: contiguous neuron neighborhoods zeroed together,
applied at training and inference; a fixed mask set acts as a virtual
ensemble with the same sampling interface as a real one.

A mask drops, for every unit i independently with probability p, the block
i .. i+k-1 (indices wrap modulo the layer width, keeping the keep
probability (1-p)^k uniform across positions). Kept units are scaled by
1/(1-p)^k at mask time, so inference needs no rescaling pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ConfigError
from .gan import GanTrainer, sample, _val_split
from .rng import substream


@dataclass
class StructuredDropoutSpec:
    p: float = 0.05
    k: int = 3
    layers: list | None = None  # hidden-layer indices; None = every hidden layer

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ConfigError("dropout probability p must be in [0, 1)")
        if self.k < 1:
            raise ConfigError("neighborhood size k must be >= 1")

    @property
    def keep_probability(self):
        return (1.0 - self.p) ** self.k

    @property
    def scale(self):
        return 1.0 / self.keep_probability

    def layer_indices(self, n_hidden):
        if self.layers is None:
            return list(range(n_hidden))
        return [i for i in self.layers if 0 <= i < n_hidden]


def make_structured_mask(spec, layer_widths, rng):
    """One mask: per-layer scaled keep vectors (0 or 1/(1-p)^k)."""
    masks = {}
    indices = spec.layer_indices(len(layer_widths))
    for li in indices:
        width = layer_widths[li]
        keep = np.ones(width)
        starts = np.flatnonzero(rng.random(width) < spec.p)
        for s in starts:
            for j in range(spec.k):
                keep[(s + j) % width] = 0.0
        masks[li] = keep * spec.scale
    return masks


def dropout_forward(gen, mask, conditions, rng):
    """Generator sample with a fixed mask on the hidden activations."""
    return sample(gen, conditions, rng, masks=mask)


def _mask_provider(spec, layer_widths):
    return lambda rng: make_structured_mask(spec, layer_widths, rng)


def train_mc_dropout_gan(cfg, spec, train):
    """Same loop as the plain trainer, with a fresh structured mask per
    generator forward pass. With p = 0 the masks are all-ones and the run is
    bitwise identical to the dropout-free trainer at the same seed."""
    hidden = list(cfg.gen_hidden)
    trainer = GanTrainer(
        cfg, train, stream_tag=("gan",), mask_provider=_mask_provider(spec, hidden)
    )
    vx, vy = _val_split(trainer)
    trainer.log.ed_initial = trainer.validation_ed(vx, vy)
    for i in range(cfg.gen_steps):
        trainer.step(i)
    trainer.log.ed_final = trainer.validation_ed(vx, vy)
    trainer.log.dropout = {"p": spec.p, "k": spec.k, "layers": spec.layers}
    return trainer.gen, trainer.critic, trainer.log


@dataclass
class VirtualEnsemble:
    """Fixed mask set over one generator; quacks like an Ensemble for
    sampling (n_members / sample_member)."""

    gen: object
    spec: StructuredDropoutSpec
    masks: list
    seed: int

    @property
    def n_members(self):
        return len(self.masks)

    def sample_member(self, i, conditions, rng):
        return dropout_forward(self.gen, self.masks[i], conditions, rng)


def virtual_ensemble(gen, spec, n_masks, seed):
    """Generate the fixed mask set once; member i is the generator under
    mask i. Masks are regenerable bit-exactly from (seed, spec)."""
    if n_masks < 2:
        raise ConfigError("a virtual ensemble needs at least 2 masks")
    widths = gen.mlp.hidden_widths
    rng = substream(seed, "dropout-masks")
    masks = [make_structured_mask(spec, widths, rng) for _ in range(n_masks)]
    return VirtualEnsemble(gen, spec, masks, seed)
