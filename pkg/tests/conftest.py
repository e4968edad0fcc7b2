"""Shared fixtures. Trained models are session scoped because each training
run costs tens of seconds; tests must not mutate them."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ganuq.data import Dataset
from ganuq.gan import GanConfig, train_gan


def toy_gan_config(**overrides):
    """Small-capacity recipe tuned for ~1-D toy problems.

    The gradient-penalty weight is deliberately below the library default:
    at this scale a heavy penalty visibly over-disperses the generator.
    """
    base = dict(
        batch_size=256,
        gen_steps=2500,
        critic_steps=5,
        lr=3e-4,
        critic_lr=1e-3,
        gp_weight=0.1,
        d_noise=4,
        gen_hidden=[32, 32],
        critic_hidden=[64, 64],
        critic_out=32,
        seed=0,
    )
    base.update(overrides)
    return GanConfig(**base)


def make_toy_dataset(n=8000, seed=100, slope=0.5, sigma=1.0):
    """y ~ N(slope * x, sigma^2), x ~ U(-1, 1), single background species."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 1))
    y = slope * x + sigma * rng.standard_normal((n, 1))
    return Dataset(x, y, np.full(n, "bg"))


@pytest.fixture(scope="session")
def toy_dataset():
    return make_toy_dataset()


@pytest.fixture(scope="session")
def trained_toy(toy_dataset):
    """A converged single GAN on the toy law; shared read-only."""
    cfg = toy_gan_config(seed=5)
    return train_gan(cfg, toy_dataset)
