"""Conditional Cramer GAN: generator/critic models, the critic surrogate
f(y) = ||D(y) - D(y_g')|| - ||D(y)||, generator and critic objectives
(gradient penalty on interpolates), and a deterministic training loop.

The critic is vector-valued; conditions are concatenated to both the
generator and the critic inputs. Validation quality is tracked with a
conditional energy-distance estimator on a held-out slice of the training
set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .data import Dataset
from .rng import substream

DEFAULT_HIDDEN = [128] * 5


class TrainingError(Exception):
    pass


@dataclass
class GanConfig:
    batch_size: int = 512
    gen_steps: int = 1000
    critic_steps: int = 3
    lr: float = 1e-4
    critic_lr: float | None = None  # defaults to lr
    beta1: float = 0.5
    beta2: float = 0.9
    gp_weight: float = 10.0
    d_noise: int = 64
    gen_hidden: list = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    critic_hidden: list = field(default_factory=lambda: list(DEFAULT_HIDDEN))
    critic_out: int = 64
    activation: str = "leaky_relu"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0 or self.critic_steps <= 0 or self.d_noise <= 0:
            raise ValueError("batch size, critic steps and d_noise must be positive")
        if self.gen_steps < 0 or self.gp_weight < 0:
            raise ValueError("gen_steps and gp_weight must be non-negative")
        if self.critic_out < 2:
            raise ValueError("critic embedding width must be >= 2")


@dataclass
class GeneratorModel:
    mlp: nd.MlpParams
    d_noise: int
    normalizer: object = None

    @property
    def c(self):
        return self.mlp.input_dim - self.d_noise

    @property
    def k(self):
        return self.mlp.output_dim


@dataclass
class CriticModel:
    mlp: nd.MlpParams  # input c + k -> embedding width


def init_generator(cfg, c, k, rng, seed=None):
    mlp = nd.init_mlp(c + cfg.d_noise, cfg.gen_hidden, k, rng, cfg.activation, seed=seed)
    return GeneratorModel(mlp, cfg.d_noise)


def init_critic(cfg, c, k, rng, seed=None):
    mlp = nd.init_mlp(c + k, cfg.critic_hidden, cfg.critic_out, rng, cfg.activation, seed=seed)
    return CriticModel(mlp)


def sample(gen, conditions, rng, masks=None):
    """Generate one response row per (normalized) condition row."""
    conditions = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    noise = rng.standard_normal((conditions.shape[0], gen.d_noise))
    return nd.mlp_forward(gen.mlp, np.hstack([conditions, noise]), masks=masks)


def _const_leaves(params):
    return [nd.Tensor(a) for a in params.flat_arrays()]


def critic_embed(critic, leaves, conditions, y):
    """D(x, y): traced critic embedding of a (condition, response) batch."""
    x = conditions if isinstance(conditions, nd.Tensor) else nd.Tensor(conditions)
    y = y if isinstance(y, nd.Tensor) else nd.Tensor(y)
    return nd.mlp_forward_traced(critic.mlp, leaves, nd.concat([x, y], axis=1))


def critic_surrogate_f(critic, y, y_g_prime, conditions, leaves=None):
    """Rowwise f(y) = ||D(y) - D(y_g')||_2 - ||D(y)||_2."""
    if leaves is None:
        leaves = _const_leaves(critic.mlp)
    d_y = critic_embed(critic, leaves, conditions, y)
    d_gp = critic_embed(critic, leaves, conditions, y_g_prime)
    return nd.row_norm(d_y - d_gp) - nd.row_norm(d_y)


def generator_loss(critic, y_r, y_g, y_g_prime, conditions, leaves=None):
    """Batch mean of f(y_r) - f(y_g) with a shared second generated batch."""
    f_r = critic_surrogate_f(critic, y_r, y_g_prime, conditions, leaves)
    f_g = critic_surrogate_f(critic, y_g, y_g_prime, conditions, leaves)
    return nd.tmean(f_r - f_g)


def diversity_term(critic, y_g, y_union, conditions, leaves=None):
    """Batch mean of ||D(y_g) - D(y_union)||_2, rowwise paired."""
    if leaves is None:
        leaves = _const_leaves(critic.mlp)
    d_g = critic_embed(critic, leaves, conditions, y_g)
    d_u = critic_embed(critic, leaves, conditions, y_union)
    return nd.tmean(nd.row_norm(d_g - d_u))


def ensemble_generator_loss(critic, y_r, y_g, y_g_prime, y_union, conditions, alpha,
                            leaves=None):
    """Generator objective with the diversity term: L_G - alpha * mean
    ||D(y_g) - D(y_union)||."""
    base = generator_loss(critic, y_r, y_g, y_g_prime, conditions, leaves)
    if alpha == 0.0:
        return base
    return base - alpha * diversity_term(critic, y_g, y_union, conditions, leaves)


def critic_loss(critic, leaves, y_r, y_g, y_g_prime, conditions, gp_weight, eps_rng):
    """Negative generator surrogate plus gradient penalty on interpolates."""
    surr = generator_loss(critic, y_r, y_g, y_g_prime, conditions, leaves)
    loss = -1.0 * surr
    if gp_weight > 0.0:
        eps = eps_rng.uniform(size=(y_r.shape[0], 1))
        y_hat = nd.Tensor(eps * y_r + (1.0 - eps) * y_g, requires_grad=True)
        f_hat = critic_surrogate_f(critic, y_hat, y_g_prime, conditions, leaves)
        (g,) = nd.grad(nd.tsum(f_hat), [y_hat], create_graph=True)
        penalty = nd.tmean((nd.row_norm(g) - 1.0) ** 2)
        loss = loss + gp_weight * penalty
    return loss


# ---------------------------------------------------------------------------
# energy distance validation metric
# ---------------------------------------------------------------------------

def energy_distance(a, b, max_rows=512, rng=None):
    """Plain energy-distance estimator 2 E||a-b|| - E||a-a'|| - E||b-b'||."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if rng is not None:
        if a.shape[0] > max_rows:
            a = a[rng.choice(a.shape[0], max_rows, replace=False)]
        if b.shape[0] > max_rows:
            b = b[rng.choice(b.shape[0], max_rows, replace=False)]

    def mean_dist(u, v, exclude_diag):
        d = np.sqrt(((u[:, None, :] - v[None, :, :]) ** 2).sum(axis=2))
        if exclude_diag:
            n = d.shape[0]
            return d.sum() / (n * (n - 1)) if n > 1 else 0.0
        return d.mean()

    return 2.0 * mean_dist(a, b, False) - mean_dist(a, a, True) - mean_dist(b, b, True)


def conditional_energy_distance(conditions, y_real, sampler, rng, n_bins=5):
    """Average energy distance over quantile bins of the first condition.

    `sampler(conditions, rng)` produces generated responses at the given
    conditions.
    """
    y_gen = sampler(conditions, rng)
    proj = conditions[:, 0]
    edges = np.quantile(proj, np.linspace(0, 1, n_bins + 1))
    vals = []
    for i in range(n_bins):
        lo, hi = edges[i], edges[i + 1]
        m = (proj >= lo) & ((proj < hi) if i < n_bins - 1 else (proj <= hi))
        if m.sum() < 4:
            continue
        vals.append(energy_distance(y_real[m], y_gen[m], rng=rng))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainingLog:
    steps: list = field(default_factory=list)  # per gen step: dicts of losses
    ed_initial: float = float("nan")
    ed_final: float = float("nan")
    alphas: list = field(default_factory=list)
    phase_boundaries: list = field(default_factory=list)
    dropout: dict | None = None


class GanTrainer:
    """Single-member alternating Adam loop over normalized training rows.

    `mask_provider(rng)` (optional) supplies fresh generator dropout masks
    per forward pass; `stream_tag` isolates the RNG substreams of ensemble
    members sharing one global seed.
    """

    def __init__(self, cfg, train, stream_tag=("gan",), mask_provider=None):
        if not isinstance(train, Dataset):
            raise TypeError("train must be a Dataset")
        self.cfg = cfg
        self.conds = train.conditions
        self.resps = train.responses
        self.c = train.c
        self.k = train.k
        self.mask_provider = mask_provider

        tag = tuple(stream_tag)
        self.rng_batch = substream(cfg.seed, *tag, "batch")
        self.rng_noise = substream(cfg.seed, *tag, "noise")
        self.rng_eps = substream(cfg.seed, *tag, "eps")
        self.rng_mask = substream(cfg.seed, *tag, "mask")
        self.rng_val = substream(cfg.seed, *tag, "val")

        rng_init_g = substream(cfg.seed, *tag, "init-gen")
        rng_init_c = substream(cfg.seed, *tag, "init-critic")
        self.gen = init_generator(cfg, self.c, self.k, rng_init_g, seed=cfg.seed)
        self.critic = init_critic(cfg, self.c, self.k, rng_init_c, seed=cfg.seed)

        self.gen_state = nd.adam_init(
            self.gen.mlp.flat_arrays(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2
        )
        self.critic_state = nd.adam_init(
            self.critic.mlp.flat_arrays(),
            lr=cfg.critic_lr if cfg.critic_lr is not None else cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
        )
        self.log = TrainingLog()

    def reinit_generator(self, rng):
        cfg = self.cfg
        self.gen = init_generator(cfg, self.c, self.k, rng, seed=cfg.seed)
        self.gen_state = nd.adam_init(
            self.gen.mlp.flat_arrays(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2
        )

    # -- batching ----------------------------------------------------------

    def _batch(self):
        idx = self.rng_batch.integers(0, self.conds.shape[0], size=self.cfg.batch_size)
        return self.conds[idx], self.resps[idx]

    def _masks(self):
        return self.mask_provider(self.rng_mask) if self.mask_provider else None

    def _generate_np(self, conditions):
        """Detached generator sample with the trainer's noise stream."""
        return sample(self.gen, conditions, self.rng_noise, masks=self._masks())

    def _generate_traced(self, leaves, conditions):
        z = self.rng_noise.standard_normal((conditions.shape[0], self.cfg.d_noise))
        x = np.hstack([conditions, z])
        return nd.mlp_forward_traced(self.gen.mlp, leaves, nd.Tensor(x), masks=self._masks())

    # -- updates -----------------------------------------------------------

    def critic_update(self):
        x, y_r = self._batch()
        y_g = self._generate_np(x)
        y_gp = self._generate_np(x)
        leaves = nd.param_leaves(self.critic.mlp)
        loss = critic_loss(
            self.critic, leaves, y_r, y_g, y_gp, x, self.cfg.gp_weight, self.rng_eps
        )
        grads = [g.data for g in nd.grad(loss, leaves)]
        new, self.critic_state = nd.adam_step(
            self.critic.mlp.flat_arrays(), grads, self.critic_state
        )
        self.critic.mlp.set_flat_arrays(new)
        return loss.item()

    def generator_update(self, alpha=0.0, union_sampler=None):
        x, y_r = self._batch()
        leaves = nd.param_leaves(self.gen.mlp)
        y_g = self._generate_traced(leaves, x)
        y_gp = self._generate_traced(leaves, x)
        if alpha != 0.0:
            y_union = union_sampler(x)
            loss = ensemble_generator_loss(
                self.critic, nd.Tensor(y_r), y_g, y_gp, nd.Tensor(y_union), x, alpha
            )
        else:
            loss = generator_loss(self.critic, nd.Tensor(y_r), y_g, y_gp, x)
        grads = [g.data for g in nd.grad(loss, leaves)]
        new, self.gen_state = nd.adam_step(
            self.gen.mlp.flat_arrays(), grads, self.gen_state
        )
        self.gen.mlp.set_flat_arrays(new)
        return loss.item()

    def step(self, step_index, alpha=0.0, union_sampler=None):
        c_loss = g_loss = float("nan")
        for _ in range(self.cfg.critic_steps):
            c_loss = self.critic_update()
        g_loss = self.generator_update(alpha=alpha, union_sampler=union_sampler)
        if not (np.isfinite(c_loss) and np.isfinite(g_loss)):
            raise TrainingError(f"non-finite loss at generator step {step_index}")
        self.log.steps.append(
            {"step": step_index, "critic_loss": c_loss, "gen_loss": g_loss}
        )
        return c_loss, g_loss

    # -- validation --------------------------------------------------------

    def validation_ed(self, val_conds, val_resps):
        rng = substream(self.cfg.seed, "val-ed", len(self.log.steps))
        return conditional_energy_distance(
            val_conds,
            val_resps,
            lambda x, r: sample(self.gen, x, r, masks=self._masks()),
            rng,
            n_bins=min(5, max(1, val_conds.shape[0] // 8)),
        )


def _val_split(trainer, frac=0.1):
    n = trainer.conds.shape[0]
    n_val = max(8, int(n * frac))
    idx = trainer.rng_val.choice(n, size=min(n_val, n), replace=False)
    return trainer.conds[idx], trainer.resps[idx]


def train_gan(cfg, train, stream_tag=("gan",), mask_provider=None):
    """Train a single conditional Cramer GAN; returns (gen, critic, log)."""
    trainer = GanTrainer(cfg, train, stream_tag=stream_tag, mask_provider=mask_provider)
    vx, vy = _val_split(trainer)
    trainer.log.ed_initial = trainer.validation_ed(vx, vy)
    for i in range(cfg.gen_steps):
        trainer.step(i)
    trainer.log.ed_final = trainer.validation_ed(vx, vy)
    return trainer.gen, trainer.critic, trainer.log
