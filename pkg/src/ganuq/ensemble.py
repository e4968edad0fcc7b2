"""Adversarial deep ensembles: three-phase training with a diversity term.

Phase 1 trains N independent GANs (alpha = 0, distinct seed substreams).
Phase 2 reinitializes the generators with fresh random weights, keeps the
critic weights, and turns the diversity term on. Phase 3 trains all members
jointly while alpha decays linearly to exactly 0; the union batch y_ug is
resampled every step from the current members (uniform member per row), so
it tracks the mixture distribution.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import ndmath as nd
from .data import ConfigError
from .gan import (
    GanTrainer,
    TrainingError,
    diversity_term,
    ensemble_generator_loss,
    sample,
    _val_split,
)
from .rng import substream
from .ndmath.serialize import dump_json, load_json, load_mlp, save_mlp


@dataclass
class AdversarialSchedule:
    alpha_initial: float = 10.0
    phase1_steps: int = 500
    phase3_steps: int = 500

    def __post_init__(self):
        if self.alpha_initial < 0:
            raise ConfigError("alpha_initial must be >= 0")
        if self.phase1_steps < 0 or self.phase3_steps < 0:
            raise ConfigError("phase step budgets must be >= 0")

    def alpha_at(self, step):
        """Linear decay over phase 3; the final step uses alpha = 0 exactly."""
        t = self.phase3_steps
        if t <= 1:
            return 0.0
        return self.alpha_initial * (1.0 - step / (t - 1.0))


@dataclass
class Ensemble:
    members: list  # (GeneratorModel, CriticModel) pairs
    log: dict = field(default_factory=dict)  # alpha trace, phase boundaries

    def __post_init__(self):
        if len(self.members) < 2:
            raise ConfigError("ensemble needs at least 2 members")
        gens = [g for g, _ in self.members]
        if len({(g.c, g.k, g.d_noise) for g in gens}) != 1:
            raise ConfigError("members must share c, k and d_noise")

    @property
    def n_members(self):
        return len(self.members)

    def sample_member(self, i, conditions, rng):
        return sample(self.members[i][0], conditions, rng)


def sample_members(ens, conditions, rng):
    """One response batch per member, independent noise per member."""
    return [ens.sample_member(i, conditions, rng) for i in range(ens.n_members)]


def sample_union(ens, conditions, rng):
    """Mixture batch: each row produced by a uniformly random member."""
    conditions = np.atleast_2d(conditions)
    n = conditions.shape[0]
    which = rng.integers(0, ens.n_members, size=n)
    out = np.empty((n, ens.members[0][0].k))
    for m in range(ens.n_members):
        rows = np.flatnonzero(which == m)
        if rows.size:
            out[rows] = ens.sample_member(m, conditions[rows], rng)
    return out


def train_adversarial_ensemble(cfg, schedule, n_members, train):
    """Algorithm: independent pre-training, generator re-init with kept
    critics, then joint training with decaying alpha. Returns an Ensemble
    whose log records the alpha value actually applied at every phase-3
    step."""
    if n_members < 2:
        raise ConfigError("n_members must be >= 2")

    trainers = [
        GanTrainer(cfg, train, stream_tag=("member", m)) for m in range(n_members)
    ]
    alphas = []
    # phase 1: classic loss, independent members
    for m, tr in enumerate(trainers):
        for i in range(schedule.phase1_steps):
            try:
                tr.step(i)
            except TrainingError as exc:
                raise TrainingError(f"phase 1, member {m}: {exc}") from exc

    # phase 2: fresh generators, critics kept
    for m, tr in enumerate(trainers):
        tr.reinit_generator(substream(cfg.seed, "member", m, "reinit"))

    # phase 3: joint training with the diversity term
    rng_union = substream(cfg.seed, "union")
    for i in range(schedule.phase3_steps):
        alpha = schedule.alpha_at(i)
        alphas.append(alpha)
        current = Ensemble.__new__(Ensemble)  # light view, skip validation
        current.members = [(tr.gen, tr.critic) for tr in trainers]
        current.log = {}
        for m, tr in enumerate(trainers):
            union_sampler = lambda x: sample_union(current, x, rng_union)
            try:
                tr.step(schedule.phase1_steps + i, alpha=alpha, union_sampler=union_sampler)
            except TrainingError as exc:
                raise TrainingError(f"phase 3, member {m}: {exc}") from exc

    log = {
        "alphas": alphas,
        "alpha_initial": schedule.alpha_initial,
        "phase_boundaries": {
            "phase1_end": schedule.phase1_steps,
            "phase3_end": schedule.phase1_steps + schedule.phase3_steps,
        },
        "phase1_steps": schedule.phase1_steps,
        "phase3_steps": schedule.phase3_steps,
    }
    return Ensemble([(tr.gen, tr.critic) for tr in trainers], log=log)


# ---------------------------------------------------------------------------
# persistence: directory of member models plus the schedule log
# ---------------------------------------------------------------------------

def save_ensemble(ens, directory):
    os.makedirs(directory, exist_ok=True)
    for i, (gen, critic) in enumerate(ens.members):
        save_mlp(gen.mlp, os.path.join(directory, f"member_{i:02d}_generator.json"))
        save_mlp(critic.mlp, os.path.join(directory, f"member_{i:02d}_critic.json"))
    meta = dict(ens.log)
    meta["n_members"] = ens.n_members
    meta["d_noise"] = ens.members[0][0].d_noise
    dump_json(meta, os.path.join(directory, "schedule.json"))


def load_ensemble(directory):
    from .gan import CriticModel, GeneratorModel

    meta = load_json(os.path.join(directory, "schedule.json"))
    members = []
    for i in range(meta["n_members"]):
        gen = GeneratorModel(
            load_mlp(os.path.join(directory, f"member_{i:02d}_generator.json")),
            meta["d_noise"],
        )
        critic = CriticModel(
            load_mlp(os.path.join(directory, f"member_{i:02d}_critic.json"))
        )
        members.append((gen, critic))
    log = {k: v for k, v in meta.items() if k not in ("n_members", "d_noise")}
    return Ensemble(members, log=log)
