"""Shared test utilities: closed-form Gaussian samplers posing as
uncertain generators, and a small finite-difference oracle."""

import numpy as np


class OracleMember:
    """Gaussian sampler y ~ N(mean(X) + delta, sigma(X)^2) with known law."""

    def __init__(self, mean_fn, sigma_fn, delta=0.0):
        self.mean_fn = mean_fn
        self.sigma_fn = sigma_fn
        self.delta = np.asarray(delta, dtype=np.float64)

    def __call__(self, conditions, rng):
        conditions = np.atleast_2d(conditions)
        mu = self.mean_fn(conditions)
        sd = self.sigma_fn(conditions)
        return mu + self.delta + sd * rng.standard_normal(mu.shape)


class OracleEnsemble:
    """Ensemble-shaped family of oracle members shifted by known offsets."""

    def __init__(self, mean_fn, sigma_fn, deltas):
        self.members = [OracleMember(mean_fn, sigma_fn, d) for d in deltas]

    @property
    def n_members(self):
        return len(self.members)

    def sample_member(self, i, conditions, rng):
        return self.members[i](conditions, rng)
