"""Distilling ensemble uncertainty into explicit variance regressors.

Paired squared differences estimate variances: two inferences of one
member give (Y2 - Y1)^2 with expectation 2*Var_pdf(Y|X); two distinct
members give targets with expectation 2*Var_tot(Y|X). MLP regressors f_r
and f_e fit those targets as functions of the conditions, and the
systematic uncertainty is sigma_syst(X) = sqrt(max(0, f_e/2 - f_r/2)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .data import ConfigError
from .gan import TrainingError
from .rng import substream

MIN_PAIR_ROWS = 1000


@dataclass
class PairTargetSet:
    conditions: np.ndarray  # (n, c)
    targets: np.ndarray  # (n, k) squared differences, >= 0
    source: str  # "reference" | "ensemble"

    def __post_init__(self):
        if self.source not in ("reference", "ensemble"):
            raise ConfigError(f"unknown pair source {self.source!r}")
        if (self.targets < 0).any():
            raise ConfigError("squared-difference targets must be >= 0")

    def __len__(self):
        return self.conditions.shape[0]


def build_reference_pairs(sampler, conditions, rng):
    """Targets from two independent inferences of the same sampler.

    `sampler(conditions, rng)` -> responses; called twice with independent
    noise at the same conditions.
    """
    conditions = np.atleast_2d(conditions)
    y1 = sampler(conditions, rng)
    y2 = sampler(conditions, rng)
    return PairTargetSet(conditions, (y2 - y1) ** 2, "reference")


def build_ensemble_pairs(ens, conditions, rng):
    """Targets from two distinct members, chosen uniformly without
    replacement per row."""
    if ens.n_members < 2:
        raise ConfigError("ensemble pairs need at least 2 members")
    conditions = np.atleast_2d(conditions)
    n = conditions.shape[0]
    first = rng.integers(0, ens.n_members, size=n)
    shift = rng.integers(1, ens.n_members, size=n)
    second = (first + shift) % ens.n_members

    k = ens.sample_member(0, conditions[:1], substream(0, "probe")).shape[1]
    y1 = np.empty((n, k))
    y2 = np.empty((n, k))
    for m in range(ens.n_members):
        rows = np.flatnonzero(first == m)
        if rows.size:
            y1[rows] = ens.sample_member(m, conditions[rows], rng)
        rows = np.flatnonzero(second == m)
        if rows.size:
            y2[rows] = ens.sample_member(m, conditions[rows], rng)
    return PairTargetSet(conditions, (y2 - y1) ** 2, "ensemble")


def expanded_condition_sample(conditions, n, rng, expand=0.2):
    """Pair-building conditions: half bootstrapped training rows, half
    uniform over the training bounding box expanded by `expand` per side,
    so the regressors extrapolate mildly beyond the training support."""
    conditions = np.atleast_2d(conditions)
    n_boot = n // 2
    boot = conditions[rng.integers(0, conditions.shape[0], size=n_boot)]
    lo = conditions.min(axis=0)
    hi = conditions.max(axis=0)
    span = hi - lo
    box = rng.uniform(
        lo - expand * span, hi + expand * span, size=(n - n_boot, conditions.shape[1])
    )
    return np.vstack([boot, box])


# ---------------------------------------------------------------------------
# variance regressors
# ---------------------------------------------------------------------------

@dataclass
class RegressorConfig:
    hidden: list = field(default_factory=lambda: [64, 64])
    activation: str = "relu"
    lr: float = 1e-3
    batch_size: int = 256
    epochs: int = 60
    seed: int = 0


@dataclass
class VarianceRegressor:
    """Positive-output MLP f(X) fitted to squared-difference targets, so
    f(X) estimates 2*Var(Y|X) for its source."""

    mlp: nd.MlpParams
    source: str
    train_mse: list = field(default_factory=list)

    def predict(self, conditions):
        conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
        raw = nd.mlp_forward(self.mlp, conditions)
        return np.logaddexp(0.0, raw)  # softplus head


def train_variance_regressor(pairs, cfg=None):
    """MSE fit of a softplus-headed MLP to the pair targets."""
    cfg = cfg or RegressorConfig()
    if len(pairs) < MIN_PAIR_ROWS:
        raise ConfigError(f"need >= {MIN_PAIR_ROWS} pair rows, got {len(pairs)}")
    c = pairs.conditions.shape[1]
    k = pairs.targets.shape[1]
    rng = substream(cfg.seed, "regressor", pairs.source)
    mlp = nd.init_mlp(c, cfg.hidden, k, rng, cfg.activation, seed=cfg.seed)
    state = nd.adam_init(mlp.flat_arrays(), lr=cfg.lr, beta1=0.9, beta2=0.999)

    n = len(pairs)
    mse_log = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            x, t = pairs.conditions[idx], pairs.targets[idx]
            leaves = nd.param_leaves(mlp)
            raw = nd.mlp_forward_traced(mlp, leaves, nd.Tensor(x))
            pred = nd.softplus(raw)
            loss = nd.tmean((pred - nd.Tensor(t)) ** 2)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingError(f"regressor diverged at epoch {epoch}")
            epoch_losses.append(val)
            grads = [g.data for g in nd.grad(loss, leaves)]
            new, state = nd.adam_step(mlp.flat_arrays(), grads, state)
            mlp.set_flat_arrays(new)
        mse_log.append(float(np.mean(epoch_losses)))
    return VarianceRegressor(mlp, pairs.source, train_mse=mse_log)


@dataclass
class VarianceRegressorPair:
    f_r: VarianceRegressor  # reference source: estimates 2*Var_pdf
    f_e: VarianceRegressor  # ensemble source: estimates 2*Var_tot

    def __post_init__(self):
        if self.f_r.source != "reference" or self.f_e.source != "ensemble":
            raise ConfigError("regressor sources mismatched")


@dataclass
class SystUncertainty:
    """sigma_syst(X) evaluator with a clamp diagnostic counter."""

    pair: VarianceRegressorPair
    clamped: int = 0

    def __call__(self, conditions):
        fe = self.pair.f_e.predict(conditions)
        fr = self.pair.f_r.predict(conditions)
        var_train = 0.5 * fe - 0.5 * fr
        neg = var_train < 0
        self.clamped += int(neg.sum())
        return np.sqrt(np.where(neg, 0.0, var_train))


def sigma_syst(pair, conditions):
    """sqrt(max(0, f_e(X)/2 - f_r(X)/2)), per output dimension."""
    return SystUncertainty(pair)(conditions)
