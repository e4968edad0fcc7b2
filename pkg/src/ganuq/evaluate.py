"""Figure of merit and experiment drivers.

A threshold is tuned on training data so the chosen signal species passes
at the target rate (default 90%), then the background efficiency of
`score > threshold` is compared between real and generated data, per bin.
The uncertainty band per bin is mean +/- one sample standard deviation over
the members of an uncertain generator; coverage is the fraction of bins
whose real efficiency falls inside the band.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ConfigError, Dataset


class LeakageError(Exception):
    pass


@dataclass
class ThresholdSpec:
    signal: str  # signal species label
    score_index: int  # which response dimension carries the score
    target_efficiency: float = 0.90
    threshold: float | None = None  # fitted value
    degenerate: bool = False
    fit_fingerprint: str | None = None  # dataset the threshold was fitted on

    def __post_init__(self):
        if not 0.0 < self.target_efficiency < 1.0:
            raise ConfigError("target efficiency must be in (0, 1)")


def fit_threshold(scores, target_eff):
    """Largest sample value t with fraction(score > t) >= target_eff.

    Returns (threshold, achieved_efficiency, degenerate). If no sample value
    reaches the target under strict inequality (e.g. all scores equal), the
    minimum is returned with degenerate=True.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ConfigError("cannot fit a threshold on empty scores")
    s = np.sort(scores)
    n = s.size
    # fraction strictly above s[i] is (n - searchsorted_right(s[i])) / n,
    # non-increasing in i: take the largest i that still meets the target
    above = (n - np.searchsorted(s, s, side="right")) / n
    ok = np.flatnonzero(above >= target_eff)
    if ok.size == 0:
        return float(s[0]), float(above[0]), True
    i = ok[-1]
    return float(s[i]), float(above[i]), False


def fit_threshold_spec(spec, train):
    """Fit the spec's threshold on the training dataset's signal rows."""
    signal = train.of_species(spec.signal)
    if len(signal) < 10:
        raise ConfigError(f"need >= 10 rows of species {spec.signal!r}")
    scores = signal.responses[:, spec.score_index]
    t, _, degenerate = fit_threshold(scores, spec.target_efficiency)
    spec.threshold = t
    spec.degenerate = degenerate
    spec.fit_fingerprint = train.fingerprint()
    return spec


def background_efficiency(scores, threshold):
    """Fraction of background scores strictly above the threshold."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ConfigError("cannot compute efficiency on empty scores")
    return float((scores > threshold).mean())


@dataclass
class Binning:
    feature: int = 1  # condition feature for the axis (momentum-like)
    n_bins: int = 10


@dataclass
class BinRow:
    label: str
    lo: float
    hi: float
    n_background: int
    real_efficiency: float
    member_efficiencies: list
    center: float
    half_width: float
    binomial_error: float  # diagnostic only, excluded from coverage

    def covered(self):
        return abs(self.real_efficiency - self.center) <= self.half_width


@dataclass
class EfficiencyReport:
    species: str
    score_index: int
    threshold: float
    axis: str
    bins: list = field(default_factory=list)
    dropped: list = field(default_factory=list)
    coverage: float = float("nan")
    band_kind: str = "member-spread"

    def finalize(self):
        if self.bins:
            self.coverage = float(np.mean([b.covered() for b in self.bins]))
        return self

    def to_dict(self):
        return {
            "species": self.species,
            "score_index": self.score_index,
            "threshold": self.threshold,
            "axis": self.axis,
            "band_kind": self.band_kind,
            "coverage": self.coverage,
            "dropped_bins": self.dropped,
            "bins": [
                {
                    "label": b.label,
                    "lo": b.lo,
                    "hi": b.hi,
                    "n_background": b.n_background,
                    "real_efficiency": b.real_efficiency,
                    "member_efficiencies": b.member_efficiencies,
                    "center": b.center,
                    "half_width": b.half_width,
                    "binomial_error": b.binomial_error,
                }
                for b in self.bins
            ],
        }


def _member_generated_scores(ug, conditions, score_index, rng, normalizer):
    """Per-member generated score columns at the given original-space rows."""
    norm_conds = normalizer.apply_conditions(conditions) if normalizer else conditions
    cols = []
    for m in range(ug.n_members):
        y = ug.sample_member(m, norm_conds, rng)
        if normalizer is not None:
            y = normalizer.invert_responses(y)
        cols.append(y[:, score_index])
    return cols


def _band_stats(real_scores, member_scores, threshold):
    real_eff = background_efficiency(real_scores, threshold)
    member_effs = [background_efficiency(s, threshold) for s in member_scores]
    center = float(np.mean(member_effs))
    half = float(np.std(member_effs, ddof=1)) if len(member_effs) > 1 else 0.0
    n = len(real_scores)
    binom = float(np.sqrt(max(real_eff * (1 - real_eff), 1e-12) / n))
    return real_eff, member_effs, center, half, binom


def _check_leakage(spec, test):
    if spec.threshold is None:
        raise ConfigError("threshold not fitted; call fit_threshold_spec first")
    if spec.fit_fingerprint is not None and spec.fit_fingerprint == test.fingerprint():
        raise LeakageError(
            "threshold was fitted on the evaluation dataset; fit on training data"
        )


def efficiency_bands(ug, test, spec, binning, rng, normalizer=None, background="bg"):
    """Per-bin real vs generated background efficiencies with member-spread
    bands. Bins are equal-count quantile bins of the binning feature over the
    test background rows; empty bins are dropped with a diagnostic."""
    _check_leakage(spec, test)
    bg = test.of_species(background)
    if len(bg) == 0:
        raise ConfigError("no background rows in the evaluation set")
    axis_vals = bg.conditions[:, binning.feature]
    edges = np.quantile(axis_vals, np.linspace(0, 1, binning.n_bins + 1))

    report = EfficiencyReport(
        species=spec.signal,
        score_index=spec.score_index,
        threshold=spec.threshold,
        axis=f"cond_{binning.feature}",
    )
    for i in range(binning.n_bins):
        lo, hi = edges[i], edges[i + 1]
        m = (axis_vals >= lo) & (
            (axis_vals < hi) if i < binning.n_bins - 1 else (axis_vals <= hi)
        )
        if m.sum() == 0:
            report.dropped.append(f"bin {i} [{lo:g}, {hi:g}] empty")
            continue
        rows = bg.subset(np.flatnonzero(m))
        member_scores = _member_generated_scores(
            ug, rows.conditions, spec.score_index, rng, normalizer
        )
        real_eff, member_effs, center, half, binom = _band_stats(
            rows.responses[:, spec.score_index], member_scores, spec.threshold
        )
        report.bins.append(
            BinRow(
                label=f"bin_{i}",
                lo=float(lo),
                hi=float(hi),
                n_background=int(m.sum()),
                real_efficiency=real_eff,
                member_efficiencies=member_effs,
                center=center,
                half_width=half,
                binomial_error=binom,
            )
        )
    return report.finalize()


def run_uniform_experiment(ug, train, test, specs, binning, rng, normalizer=None,
                           background="bg"):
    """One report per threshold spec; thresholds fitted on train only."""
    reports = []
    for spec in specs:
        fit_threshold_spec(spec, train)
        reports.append(
            efficiency_bands(ug, test, spec, binning, rng, normalizer, background)
        )
    return reports


def run_scan_experiment(ug, split, specs, rng, n_per_band=101917, normalizer=None,
                        background="bg", sample_seed=0):
    """Reports over band index: train bands first, then test bands.

    Each band contributes up to `n_per_band` rows (capped by band size).
    Thresholds are fitted on the split's training part.
    """
    from .data import sample_band

    train = split.train_dataset()
    reports = []
    for spec in specs:
        fit_threshold_spec(spec, train)
        report = EfficiencyReport(
            species=spec.signal,
            score_index=spec.score_index,
            threshold=spec.threshold,
            axis="band_index",
        )
        for b in range(split.n_bands):
            n = min(n_per_band, split.band(b).size)
            rows = sample_band(split, b, n, sample_seed).of_species(background)
            if len(rows) == 0:
                report.dropped.append(f"band {b} has no background rows")
                continue
            member_scores = _member_generated_scores(
                ug, rows.conditions, spec.score_index, rng, normalizer
            )
            real_eff, member_effs, center, half, binom = _band_stats(
                rows.responses[:, spec.score_index], member_scores, spec.threshold
            )
            kind = "train" if split.is_train_band(b) else "test"
            report.bins.append(
                BinRow(
                    label=f"{kind}_band_{b}",
                    lo=float(b),
                    hi=float(b + 1),
                    n_background=len(rows),
                    real_efficiency=real_eff,
                    member_efficiencies=member_effs,
                    center=center,
                    half_width=half,
                    binomial_error=binom,
                )
            )
        reports.append(report.finalize())
    return reports


def sigma_syst_bands(report, syst, ug, test, binning, rng, normalizer=None,
                     background="bg", reference_member=0):
    """Replace member-spread bands with distilled ones: the center comes from
    the reference member alone and the half-width from re-running the
    selection with the score shifted by +/- sigma_syst(X) per row
    (symmetrized)."""
    bg = test.of_species(background)
    axis_vals = bg.conditions[:, binning.feature]
    out = EfficiencyReport(
        species=report.species,
        score_index=report.score_index,
        threshold=report.threshold,
        axis=report.axis,
        band_kind="distilled-sigma-syst",
    )
    t = report.threshold
    for b in report.bins:
        i = int(b.label.rsplit("_", 1)[1])
        lo, hi = b.lo, b.hi
        m = (axis_vals >= lo) & (
            (axis_vals < hi) if i < binning.n_bins - 1 else (axis_vals <= hi)
        )
        if m.sum() == 0:
            out.dropped.append(f"bin {i} empty")
            continue
        rows = bg.subset(np.flatnonzero(m))
        norm_conds = (
            normalizer.apply_conditions(rows.conditions) if normalizer else rows.conditions
        )
        y = ug.sample_member(reference_member, norm_conds, rng)
        if normalizer is not None:
            y = normalizer.invert_responses(y)
        scores = y[:, report.score_index]
        sig = syst(norm_conds)[:, report.score_index]
        if normalizer is not None:
            sig = sig * normalizer.resp_scale[report.score_index]
        center = background_efficiency(scores, t)
        eff_plus = background_efficiency(scores + sig, t)
        eff_minus = background_efficiency(scores - sig, t)
        half = 0.5 * (abs(eff_plus - center) + abs(eff_minus - center))
        out.bins.append(
            BinRow(
                label=b.label,
                lo=lo,
                hi=hi,
                n_background=len(rows),
                real_efficiency=b.real_efficiency,
                member_efficiencies=[],
                center=center,
                half_width=half,
                binomial_error=b.binomial_error,
            )
        )
    return out.finalize()


# ---------------------------------------------------------------------------
# report emission: JSON is handled by the CLI; CSV and SVG are built here
# ---------------------------------------------------------------------------

def report_to_csv(report, path):
    import csv

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["label", "lo", "hi", "n_background", "real_efficiency", "center",
             "half_width", "binomial_error"]
        )
        for b in report.bins:
            w.writerow(
                [b.label, repr(b.lo), repr(b.hi), b.n_background,
                 repr(b.real_efficiency), repr(b.center), repr(b.half_width),
                 repr(b.binomial_error)]
            )


def report_to_svg(report, path, width=640, height=400):
    """Minimal deterministic SVG: shaded band, center line, real markers."""
    pad = 50
    xs = [0.5 * (b.lo + b.hi) for b in report.bins]
    if not xs:
        raise ConfigError("cannot plot an empty report")
    lo_x, hi_x = min(xs), max(xs)
    span_x = (hi_x - lo_x) or 1.0
    all_y = [b.real_efficiency for b in report.bins]
    all_y += [b.center + b.half_width for b in report.bins]
    all_y += [b.center - b.half_width for b in report.bins]
    lo_y, hi_y = min(all_y + [0.0]), max(all_y + [0.1])
    span_y = (hi_y - lo_y) or 1.0

    def px(x):
        return pad + (x - lo_x) / span_x * (width - 2 * pad)

    def py(y):
        return height - pad - (y - lo_y) / span_y * (height - 2 * pad)

    def pts(seq):
        return " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in seq)

    upper = [(x, b.center + b.half_width) for x, b in zip(xs, report.bins)]
    lower = [(x, b.center - b.half_width) for x, b in zip(xs, report.bins)]
    band = pts(upper + lower[::-1])
    center = pts([(x, b.center) for x, b in zip(xs, report.bins)])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<polygon points="{band}" fill="#aec7e8" fill-opacity="0.6" stroke="none"/>',
        f'<polyline points="{center}" fill="none" stroke="#1f77b4" stroke-width="2"/>',
    ]
    for x, b in zip(xs, report.bins):
        parts.append(
            f'<circle cx="{px(x):.2f}" cy="{py(b.real_efficiency):.2f}" r="3" fill="#d62728"/>'
        )
    title = f"{report.species} bg efficiency vs {report.axis} (coverage {report.coverage:.2f})"
    parts.append(f'<text x="{pad}" y="20" font-size="14">{title}</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")
