"""Synthetic datasets with analytically known conditional laws, CSV ingest,
standardization, and the two split protocols (uniform, extrapolation bands).

The synthetic generator draws condition vectors from per-feature
distributions and responses from a conditional Gaussian whose mean and
standard deviation come from small declared function families, so every
downstream variance estimate can be checked against a closed form.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

CSV_SPECIES_COLUMN = "species"


class ConfigError(Exception):
    pass


class IngestionError(Exception):
    pass


class DegenerateFeatureError(Exception):
    pass


# ---------------------------------------------------------------------------
# core containers
# ---------------------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-feature standardization for conditions and responses."""

    cond_mean: np.ndarray
    cond_scale: np.ndarray
    resp_mean: np.ndarray
    resp_scale: np.ndarray

    def apply_conditions(self, x):
        return (np.asarray(x, dtype=np.float64) - self.cond_mean) / self.cond_scale

    def invert_conditions(self, x):
        return np.asarray(x, dtype=np.float64) * self.cond_scale + self.cond_mean

    def apply_responses(self, y):
        return (np.asarray(y, dtype=np.float64) - self.resp_mean) / self.resp_scale

    def invert_responses(self, y):
        return np.asarray(y, dtype=np.float64) * self.resp_scale + self.resp_mean


@dataclass
class Dataset:
    """Rows of (condition vector, response vector) with species labels."""

    conditions: np.ndarray  # (n, c)
    responses: np.ndarray  # (n, k)
    species: np.ndarray  # (n,) str labels
    normalizer: Normalizer | None = None

    def __post_init__(self):
        self.conditions = np.asarray(self.conditions, dtype=np.float64)
        self.responses = np.asarray(self.responses, dtype=np.float64)
        self.species = np.asarray(self.species)
        if self.conditions.ndim != 2 or self.responses.ndim != 2:
            raise ConfigError("conditions and responses must be 2-D")
        n = self.conditions.shape[0]
        if self.responses.shape[0] != n or self.species.shape[0] != n:
            raise ConfigError("row counts disagree")
        if not (np.isfinite(self.conditions).all() and np.isfinite(self.responses).all()):
            raise ConfigError("non-finite values in dataset")

    def __len__(self):
        return self.conditions.shape[0]

    @property
    def c(self):
        return self.conditions.shape[1]

    @property
    def k(self):
        return self.responses.shape[1]

    def subset(self, indices):
        return Dataset(
            self.conditions[indices],
            self.responses[indices],
            self.species[indices],
            self.normalizer,
        )

    def of_species(self, label):
        return self.subset(np.flatnonzero(self.species == label))

    def fingerprint(self):
        """Content hash; used by the leakage guard and reproducibility checks."""
        h = hashlib.sha256()
        h.update(self.conditions.tobytes())
        h.update(self.responses.tobytes())
        h.update("\x00".join(self.species.tolist()).encode("utf-8"))
        return h.hexdigest()


def fit_normalizer(ds):
    """Standardization fitted on `ds` (population std); train-only by contract."""
    stats = []
    for arr, what in ((ds.conditions, "condition"), (ds.responses, "response")):
        mean = arr.mean(axis=0)
        scale = arr.std(axis=0)
        bad = np.flatnonzero(scale <= 0.0)
        if bad.size:
            raise DegenerateFeatureError(
                f"constant {what} feature(s) at index {bad.tolist()}"
            )
        stats.append((mean, scale))
    return Normalizer(stats[0][0], stats[0][1], stats[1][0], stats[1][1])


def normalize_dataset(ds, normalizer):
    out = Dataset(
        normalizer.apply_conditions(ds.conditions),
        normalizer.apply_responses(ds.responses),
        ds.species,
    )
    out.normalizer = normalizer
    return out


# ---------------------------------------------------------------------------
# synthetic specification
# ---------------------------------------------------------------------------

CONDITION_FAMILIES = ("uniform", "normal", "lognormal")
MEAN_FAMILIES = ("affine", "sine")
SIGMA_FAMILIES = ("constant", "softplus")

SIGMA_FLOOR = 1e-3


@dataclass
class SyntheticSpec:
    """Declarative synthetic data law with closed-form conditionals.

    Responses are Gaussian given conditions: y = mean(X) + shift[species]
    + sigma_true(X) * z.  mean families: "affine" (coef @ X + intercept) and
    "sine" (affine plus amp * sin(freq . X)).  sigma families: "constant"
    and "softplus" (softplus(coef @ X + intercept) + floor, positive
    everywhere).
    """

    c: int
    k: int
    conditions: list  # per-feature (family, p1, p2)
    mean_family: str
    mean_coef: np.ndarray  # (k, c)
    mean_intercept: np.ndarray  # (k,)
    sigma_family: str
    sigma_value: np.ndarray  # (k,) for "constant"
    sigma_coef: np.ndarray  # (k, c) for "softplus"
    sigma_intercept: np.ndarray  # (k,)
    species_labels: list
    species_probs: np.ndarray
    species_shifts: np.ndarray  # (n_species, k)
    background: str
    seed: int
    mean_sine_amp: np.ndarray | None = None  # (k,)
    mean_sine_freq: np.ndarray | None = None  # (k, c)

    def __post_init__(self):
        if len(self.conditions) != self.c:
            raise ConfigError("one condition distribution per feature required")
        for fam, *_ in self.conditions:
            if fam not in CONDITION_FAMILIES:
                raise ConfigError(f"unknown condition family {fam!r}")
        if self.mean_family not in MEAN_FAMILIES:
            raise ConfigError(f"unknown mean family {self.mean_family!r}")
        if self.sigma_family not in SIGMA_FAMILIES:
            raise ConfigError(f"unknown sigma family {self.sigma_family!r}")
        if self.sigma_family == "constant" and (np.asarray(self.sigma_value) <= 0).any():
            raise ConfigError("constant sigma must be positive")
        if self.background not in self.species_labels:
            raise ConfigError("background label missing from species list")

    def mean(self, x):
        """Conditional mean, shape (n, k), before the species shift."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mu = x @ np.asarray(self.mean_coef).T + np.asarray(self.mean_intercept)
        if self.mean_family == "sine":
            phase = x @ np.asarray(self.mean_sine_freq).T
            mu = mu + np.asarray(self.mean_sine_amp) * np.sin(phase)
        return mu

    def sigma(self, x):
        """Conditional standard deviation sigma_true(X), shape (n, k), > 0."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.sigma_family == "constant":
            return np.broadcast_to(
                np.asarray(self.sigma_value, dtype=np.float64), (x.shape[0], self.k)
            ).copy()
        z = x @ np.asarray(self.sigma_coef).T + np.asarray(self.sigma_intercept)
        return np.logaddexp(0.0, z) + SIGMA_FLOOR

    def shift(self, label):
        return np.asarray(self.species_shifts)[self.species_labels.index(label)]

    def sample_conditions(self, n, rng):
        cols = []
        for fam, p1, p2 in self.conditions:
            if fam == "uniform":
                cols.append(rng.uniform(p1, p2, size=n))
            elif fam == "normal":
                cols.append(rng.normal(p1, p2, size=n))
            else:
                cols.append(rng.lognormal(p1, p2, size=n))
        return np.column_stack(cols)

    def sample_responses(self, x, labels, rng):
        x = np.atleast_2d(x)
        shifts = np.asarray(self.species_shifts)[
            [self.species_labels.index(s) for s in labels]
        ]
        return self.mean(x) + shifts + self.sigma(x) * rng.standard_normal(
            (x.shape[0], self.k)
        )


def default_spec(c=3, k=5, seed=0):
    """Default synthetic law: eta-like uniform, momentum- and
    multiplicity-like lognormal conditions; gentle affine means; constant
    unit sigma; one signal species shifted per score dimension.

    Shift magnitudes put the 90%-threshold background efficiency in the
    (0.05, 0.5) window where the figure of merit is sensitive.
    """
    conditions = [("uniform", 2.0, 5.0), ("lognormal", 3.0, 0.5), ("lognormal", 3.5, 0.6)]
    while len(conditions) < c:
        conditions.append(("normal", 0.0, 1.0))
    conditions = conditions[:c]

    coef_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5E1F]))
    mean_coef = coef_rng.uniform(-0.3, 0.3, size=(k, c))
    mean_intercept = coef_rng.uniform(-1.0, 1.0, size=k)

    n_signal = min(k, 2)
    labels = ["bg"] + [f"sig_{i}" for i in range(n_signal)]
    probs = np.array([0.5] + [0.5 / n_signal] * n_signal)
    shifts = np.zeros((1 + n_signal, k))
    for i in range(n_signal):
        shifts[1 + i, i] = 2.5

    return SyntheticSpec(
        c=c,
        k=k,
        conditions=conditions,
        mean_family="affine",
        mean_coef=mean_coef,
        mean_intercept=mean_intercept,
        sigma_family="constant",
        sigma_value=np.ones(k),
        sigma_coef=np.zeros((k, c)),
        sigma_intercept=np.zeros(k),
        species_labels=labels,
        species_probs=probs,
        species_shifts=shifts,
        background="bg",
        seed=seed,
    )


def generate_synthetic(spec, n):
    """Sample `n` i.i.d. rows; deterministic given spec.seed."""
    if n <= 0:
        raise ConfigError("n must be positive")
    rng = substream(spec.seed, "synthetic")
    x = spec.sample_conditions(n, rng)
    labels = rng.choice(spec.species_labels, size=n, p=np.asarray(spec.species_probs))
    y = spec.sample_responses(x, labels, rng)
    return Dataset(x, y, labels)


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------

def csv_header(c, k):
    return [f"cond_{i}" for i in range(c)] + [f"y_{j}" for j in range(k)] + [
        CSV_SPECIES_COLUMN
    ]


def save_csv(ds, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(csv_header(ds.c, ds.k))
        for x, y, s in zip(ds.conditions, ds.responses, ds.species):
            writer.writerow(
                [repr(float(v)) for v in x] + [repr(float(v)) for v in y] + [str(s)]
            )


def load_csv(path, c=None, k=None):
    """Read a dataset; header must match the declared schema."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if c is None or k is None:
            c = sum(1 for h in header if h.startswith("cond_"))
            k = sum(1 for h in header if h.startswith("y_"))
        expect = csv_header(c, k)
        if header != expect:
            raise IngestionError(f"{path}: header {header!r} != expected {expect!r}")
        conds, resps, species = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != c + k + 1:
                raise IngestionError(
                    f"{path}:{lineno}: expected {c + k + 1} cells, got {len(row)}"
                )
            try:
                vals = [float(v) for v in row[: c + k]]
            except ValueError as exc:
                raise IngestionError(f"{path}:{lineno}: {exc}") from None
            if not all(math.isfinite(v) for v in vals):
                raise IngestionError(f"{path}:{lineno}: non-finite value")
            conds.append(vals[:c])
            resps.append(vals[c : c + k])
            species.append(row[c + k])
    if not conds:
        raise IngestionError(f"{path}: no data rows")
    return Dataset(np.array(conds), np.array(resps), np.array(species))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

def uniform_split(ds, fractions, seed):
    """Random disjoint row partition with the given fractions."""
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions) or sum(fractions) > 1.0 + 1e-12:
        raise ConfigError("fractions must be positive and sum to <= 1")
    n = len(ds)
    perm = substream(seed, "uniform-split").permutation(n)
    bounds = [0] + [int(round(sum(fractions[: i + 1]) * n)) for i in range(len(fractions))]
    parts = []
    for i in range(len(fractions)):
        idx = np.sort(perm[bounds[i] : bounds[i + 1]])
        if idx.size == 0:
            raise ConfigError(f"split part {i} is empty")
        parts.append(ds.subset(idx))
    return tuple(parts)


@dataclass
class BandSplit:
    """Extrapolation split: low-projection train region plus ordered
    equal-count test bands along a direction in normalized condition space.

    Bands are indexed globally: train bands first, then test bands.
    """

    dataset: Dataset
    direction: np.ndarray
    projections: np.ndarray
    train_indices: np.ndarray
    train_band_indices: list
    test_band_indices: list
    boundaries: list  # projection values at test-band edges

    @property
    def n_bands(self):
        return len(self.train_band_indices) + len(self.test_band_indices)

    @property
    def n_train_bands(self):
        return len(self.train_band_indices)

    def band(self, i):
        nt = len(self.train_band_indices)
        if not 0 <= i < self.n_bands:
            raise ConfigError(f"band index {i} out of range")
        return self.train_band_indices[i] if i < nt else self.test_band_indices[i - nt]

    def is_train_band(self, i):
        return i < len(self.train_band_indices)

    def train_dataset(self):
        return self.dataset.subset(self.train_indices)


def _equal_count_chunks(sorted_idx, n_chunks):
    n = sorted_idx.size
    bounds = [int(round(j * n / n_chunks)) for j in range(n_chunks + 1)]
    return [sorted_idx[bounds[j] : bounds[j + 1]] for j in range(n_chunks)]


def extrapolation_split(ds, direction=None, train_fraction=0.644, n_test_bands=10,
                        n_train_bands=1):
    """Project rows onto `direction` in the standardized condition space;
    lowest `train_fraction` quantile trains, the rest splits into
    equal-count test bands.

    The projection uses a normalizer fitted on the full dataset (split
    geometry only); the model normalizer is still fitted on train alone.
    The default train_fraction reproduces the reference 947933 / 523917
    train/test row counts on a 1.47185M-row sample.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError("train_fraction must be in (0, 1)")
    if n_test_bands < 1 or n_train_bands < 1:
        raise ConfigError("band counts must be >= 1")
    if direction is None:
        direction = np.zeros(ds.c)
        direction[:2] = 1.0
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (ds.c,) or not np.linalg.norm(direction) > 0:
        raise ConfigError("direction must be a non-zero length-c vector")
    direction = direction / np.linalg.norm(direction)

    geom = fit_normalizer(ds)
    proj = geom.apply_conditions(ds.conditions) @ direction
    order = np.argsort(proj, kind="stable")
    n_train = int(round(train_fraction * len(ds)))
    if n_train < 1 or len(ds) - n_train < n_test_bands:
        raise ConfigError("too few rows for the requested bands")
    train_idx = order[:n_train]
    test_idx = order[n_train:]

    train_bands = _equal_count_chunks(train_idx, n_train_bands)
    test_bands = _equal_count_chunks(test_idx, n_test_bands)
    if any(b.size == 0 for b in test_bands) or any(b.size == 0 for b in train_bands):
        raise ConfigError("too few rows for the requested bands")
    boundaries = [float(proj[b[0]]) for b in test_bands] + [float(proj[test_idx[-1]])]
    return BandSplit(
        dataset=ds,
        direction=direction,
        projections=proj,
        train_indices=np.sort(train_idx),
        train_band_indices=[np.sort(b) for b in train_bands],
        test_band_indices=[np.sort(b) for b in test_bands],
        boundaries=boundaries,
    )


def sample_band(split, band_index, n, seed):
    """Uniform without-replacement subsample of one band."""
    idx = split.band(band_index)
    if n > idx.size:
        raise ConfigError(f"requested {n} rows from band of size {idx.size}")
    rng = substream(seed, "band-sample", band_index)
    chosen = rng.choice(idx, size=n, replace=False)
    return split.dataset.subset(np.sort(chosen))
