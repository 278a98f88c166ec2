"""Synthetic populations with known ground truth.

Three generators feed the validation machinery:

* a 2x2 factorial population crossing differential attrition (users with
  later peaks stay active longer) against amplitude-peak correlation, used
  to demonstrate that attrition alone shifts the aggregate peak;
* null users (monotonic decay, flat, true inverted-U) for classifier
  calibration;
* bin-sampled aggregate datasets over an amplitude x sample-size grid for
  detection-power measurement.

Every user draws from an RNG stream derived from (seed, user index), so
populations are reproducible and independent of scheduling, and the
factorial cells share identical ground-truth peaks because mechanism flags
only change how already-drawn values are used.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import partial
from typing import Iterable, Sequence

import numpy as np

from ._parallel import parallel_map
from .classify import PipelineConfig, classify_curve, classify_population
from .data import BinnedCurve, ExposureSeries, InteractionEvent, aggregate_curve
from .fitting import fit_curve
from .models import HillExpParams, evaluate, peak_location

__all__ = [
    "FactorialConfig",
    "SyntheticUser",
    "SyntheticPopulation",
    "solve_half_max",
    "generate_population",
    "FactorialCell",
    "FactorialResult",
    "FACTORIAL_CELLS",
    "run_factorial",
    "generate_null_users",
    "PowerGrid",
    "PowerResult",
    "power_analysis",
    "SCENARIOS",
    "scenario_population",
]


def solve_half_max(peak: float, a: float, s: float) -> float:
    """Half-maximum exposure ``b`` placing the curve peak at ``peak``.

    The stationarity condition of the rise-decay curve gives
    b^a (a s - peak) = peak^(a+1), solvable in closed form whenever
    a * s > peak (otherwise no interior peak exists for any b).
    """
    if not a * s > peak:
        raise ValueError(f"no interior peak at {peak} for a={a}, s={s}")
    return float((peak ** (a + 1) / (a * s - peak)) ** (1.0 / a))


@dataclass(frozen=True)
class FactorialConfig:
    """Generator settings for one factorial population.

    Peak locations are log-normal with the given median; the survival law
    ties each user's last observed exposure to their peak
    (n_max = round(gamma * peak * exp(eta)), floored), and the amplitude law
    makes later-peaking users more engaged.  The survival constants are
    calibration targets chosen to land the attrition-only distortion near
    3x, not empirical facts.
    """

    n_users: int = 1000
    survival_bias: bool = True
    amplitude_correlation: bool = False
    peak_median: float = 14.3
    peak_log_sd: float = 0.6
    survival_gamma: float = 3.0
    survival_log_sd: float = 0.25
    survival_floor: int = 15
    n_max_off: int = 120
    n_max_cap: int = 600
    amp_base: float = 0.2
    amp_slope: float = 0.3
    amp_noise: float = 0.03
    amp_clip: tuple[float, float] = (0.05, 0.6)
    amp_off: float = 0.35
    onset_a: float = 2.0
    baseline_c0: float = 0.2
    s_min: float = 20.0
    s_max: float = 80.0
    seed: int = 0
    group: str = "synthetic"


@dataclass
class SyntheticUser:
    user_id: str
    params: HillExpParams
    true_peak: float
    n_max: int
    engagement: np.ndarray
    group: str = "synthetic"

    def to_series(self) -> ExposureSeries:
        return ExposureSeries(
            user_id=self.user_id,
            group=self.group,
            engagement=self.engagement,
            raw_ratings=np.where(self.engagement > 0, 5.0, 1.0),
        )


@dataclass
class SyntheticPopulation:
    users: list[SyntheticUser]
    resample_count: int
    config: FactorialConfig

    def series(self) -> list[ExposureSeries]:
        return [u.to_series() for u in self.users]

    def events(self) -> Iterable[InteractionEvent]:
        for u in self.users:
            for i, e in enumerate(u.engagement):
                yield InteractionEvent(
                    user_id=u.user_id,
                    item_id=f"item_{i + 1:04d}",
                    group=u.group,
                    rating=5.0 if e else 1.0,
                    timestamp=i + 1,
                )

    def true_peaks(self) -> np.ndarray:
        return np.array([u.true_peak for u in self.users])


# fit-engine box for b; solved values must stay strictly inside
_B_RANGE = (0.11, 199.0)


def _draw_user_params(cfg: FactorialConfig, index: int) -> tuple[float, float, float, float, float, int]:
    """Draw (peak, eps, eta, s, b, resamples) for one user.

    The draw order is fixed and flag-independent so that every factorial
    cell sees identical ground-truth peaks on a shared seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index, 0]))
    resamples = 0
    while True:
        peak = cfg.peak_median * np.exp(cfg.peak_log_sd * rng.standard_normal())
        eps = rng.normal(0.0, cfg.amp_noise)
        eta = rng.normal(0.0, cfg.survival_log_sd)
        for _ in range(50):
            s = rng.uniform(cfg.s_min, cfg.s_max)
            if cfg.onset_a * s > peak * 1.05:
                b = solve_half_max(peak, cfg.onset_a, s)
                if _B_RANGE[0] <= b <= _B_RANGE[1]:
                    return peak, eps, eta, s, b, resamples
            resamples += 1
        # peak unreachable for any admissible s: resample the user outright
        resamples += 1


def generate_population(config: FactorialConfig) -> SyntheticPopulation:
    """Generate the factorial population for one on/off mechanism cell."""
    if config.n_users < 10:
        raise ValueError("n_users must be >= 10")

    draws = [_draw_user_params(config, i) for i in range(config.n_users)]
    peaks = np.array([d[0] for d in draws])
    max_peak = peaks.max()
    total_resamples = sum(d[5] for d in draws)

    users = []
    for i, (peak, eps, eta, s, b, _) in enumerate(draws):
        if config.amplitude_correlation:
            amp = float(
                np.clip(
                    config.amp_base + config.amp_slope * peak / max_peak + eps,
                    *config.amp_clip,
                )
            )
        else:
            amp = config.amp_off
        if config.survival_bias:
            n_max = int(round(config.survival_gamma * peak * np.exp(eta)))
            n_max = min(max(n_max, config.survival_floor), config.n_max_cap)
        else:
            n_max = config.n_max_off

        params = HillExpParams(config.baseline_c0, amp, config.onset_a, b, s)
        exposures = np.arange(1, n_max + 1, dtype=float)
        probs = evaluate("hill_exp", params.as_array(), exposures)
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i, 1]))
        engagement = (rng.random(n_max) < probs).astype(np.int8)
        users.append(
            SyntheticUser(
                user_id=f"u{i:05d}",
                params=params,
                true_peak=float(peak),
                n_max=n_max,
                engagement=engagement,
                group=config.group,
            )
        )

    # the closed-form peak must be the curve's actual argmax
    for u in users[:3]:
        located = peak_location("hill_exp", u.params.as_array(), (0.5, u.true_peak * 3 + 10))
        assert located.n_star is not None and abs(located.n_star - u.true_peak) < 0.05

    return SyntheticPopulation(users=users, resample_count=total_resamples, config=config)


FACTORIAL_CELLS = {
    "baseline": (False, False),
    "survival_only": (True, False),
    "amplitude_only": (False, True),
    "both": (True, True),
}


@dataclass
class FactorialCell:
    scenario: str
    individual_median: float
    aggregate_peak: float | None
    distortion: float | None
    aggregate_r2: float | None
    aggregate_interior: bool
    n_users: int
    n_peaks: int
    failed: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "individual_median": self.individual_median,
            "aggregate_peak": self.aggregate_peak,
            "distortion": self.distortion,
            "aggregate_r2": self.aggregate_r2,
            "aggregate_interior": self.aggregate_interior,
            "n_users": self.n_users,
            "n_peaks": self.n_peaks,
            "failed": self.failed,
            "note": self.note,
        }


@dataclass
class FactorialResult:
    cells: dict[str, FactorialCell]
    mode: str
    seed: int

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "cells": {k: v.to_dict() for k, v in self.cells.items()},
        }


def _aggregate_peak(
    series: Sequence[ExposureSeries], pipeline: PipelineConfig
) -> tuple[float | None, float | None, bool]:
    curve = aggregate_curve(
        series, max_exposure=pipeline.max_exposure, min_bin_count=pipeline.min_bin_count
    )
    fit = fit_curve(curve.exposures, curve.means, "hill_exp", pipeline.fit, curve.counts)
    peak = fit.peak
    return peak.n_star, fit.r2, peak.interior


def run_factorial(
    base: FactorialConfig,
    pipeline: PipelineConfig,
    mode: str = "truth",
    jobs: int = 1,
) -> FactorialResult:
    """Run all four mechanism cells and report the distortion in each.

    ``mode="truth"`` takes individual peaks from the generator's ground
    truth; ``mode="fitted"`` re-estimates them through the per-user pipeline
    (strict-classified users only), which is slower but mirrors what real
    data allows.
    """
    if mode not in ("truth", "fitted"):
        raise ValueError("mode must be 'truth' or 'fitted'")
    cells: dict[str, FactorialCell] = {}
    for name, (survival, amplitude) in FACTORIAL_CELLS.items():
        config = replace(base, survival_bias=survival, amplitude_correlation=amplitude)
        population = generate_population(config)
        series = population.series()

        if mode == "truth":
            peaks = population.true_peaks()
        else:
            outcomes = classify_population(series, pipeline, jobs=jobs)
            peaks = np.array(
                [
                    o.fitted_peak
                    for o in outcomes
                    if o is not None and o.report.passed and o.fitted_peak is not None
                ]
            )

        if len(peaks) < 5:
            cells[name] = FactorialCell(
                scenario=name,
                individual_median=float("nan"),
                aggregate_peak=None,
                distortion=None,
                aggregate_r2=None,
                aggregate_interior=False,
                n_users=len(series),
                n_peaks=len(peaks),
                failed=True,
                note="too few individual peaks",
            )
            continue

        median_peak = float(np.median(peaks))
        try:
            agg_peak, agg_r2, interior = _aggregate_peak(series, pipeline)
        except ValueError as exc:
            cells[name] = FactorialCell(
                scenario=name,
                individual_median=median_peak,
                aggregate_peak=None,
                distortion=None,
                aggregate_r2=None,
                aggregate_interior=False,
                n_users=len(series),
                n_peaks=len(peaks),
                failed=True,
                note=f"aggregate fit failed: {exc}",
            )
            continue

        distortion = agg_peak / median_peak if agg_peak is not None else None
        cells[name] = FactorialCell(
            scenario=name,
            individual_median=median_peak,
            aggregate_peak=agg_peak,
            distortion=distortion,
            aggregate_r2=agg_r2,
            aggregate_interior=interior,
            n_users=len(series),
            n_peaks=len(peaks),
        )
    return FactorialResult(cells=cells, mode=mode, seed=base.seed)


NULL_KINDS = ("monotonic", "flat", "inverted_u")


def generate_null_users(
    kind: str,
    n: int,
    length_range: tuple[int, int] = (15, 75),
    lengths: Sequence[int] | None = None,
    seed: int = 0,
) -> list[ExposureSeries]:
    """Generate calibration users with known dynamics and Bernoulli noise.

    Priors: monotonic decay with c0 ~ U(0.2, 0.5), A ~ U(0.1, 0.3),
    s ~ U(10, 50); flat with c0 ~ U(0.3, 0.7); inverted-U with
    c0 ~ U(0.1, 0.3), A ~ U(0.15, 0.4), a ~ U(1, 3), b ~ U(3, 15),
    s ~ U(15, 60).  Series lengths come from ``lengths`` when given, else
    uniform over ``length_range``.
    """
    if kind not in NULL_KINDS:
        raise ValueError(f"kind must be one of {NULL_KINDS}")
    if n < 1:
        raise ValueError("n must be >= 1")
    if lengths is not None and len(lengths) < n:
        raise ValueError("lengths must provide one entry per user")

    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        length = int(lengths[i]) if lengths is not None else int(
            rng.integers(length_range[0], length_range[1] + 1)
        )
        exposures = np.arange(1, length + 1, dtype=float)
        if kind == "monotonic":
            c0 = rng.uniform(0.2, 0.5)
            amp = rng.uniform(0.1, 0.3)
            s = rng.uniform(10.0, 50.0)
            probs = c0 + amp * np.exp(-exposures / s)
        elif kind == "flat":
            c0 = rng.uniform(0.3, 0.7)
            probs = np.full(length, c0)
        else:
            c0 = rng.uniform(0.1, 0.3)
            amp = rng.uniform(0.15, 0.4)
            a = rng.uniform(1.0, 3.0)
            b = rng.uniform(3.0, 15.0)
            s = rng.uniform(15.0, 60.0)
            probs = evaluate("hill_exp", [c0, amp, a, b, s], exposures)
        assert np.all((probs >= 0) & (probs <= 1)), "prior produced invalid probability"
        engagement = (rng.random(length) < probs).astype(np.int8)
        out.append(
            ExposureSeries(
                user_id=f"{kind}_{i:05d}",
                group=kind,
                engagement=engagement,
                raw_ratings=np.where(engagement > 0, 5.0, 1.0),
            )
        )
    return out


@dataclass(frozen=True)
class PowerGrid:
    """Amplitude tiers (peak-to-trough engagement-probability difference)
    crossed with observations per exposure bin."""

    amplitudes: tuple[tuple[str, float], ...] = (
        ("strong", 0.18),
        ("moderate", 0.10),
        ("weak", 0.05),
        ("very_weak", 0.03),
    )
    bin_sizes: tuple[int, ...] = (100, 200, 500, 1000)
    reps: int = 30
    n_bins: int = 60
    shape_c0: float = 0.25
    shape_a: float = 2.0
    shape_b: float = 8.0
    shape_s: float = 30.0

    def tier_params(self, amplitude: float) -> np.ndarray:
        """Curve parameters realizing the tier's peak-to-trough amplitude
        exactly on the evaluation grid."""
        grid = np.arange(1, self.n_bins + 1, dtype=float)
        g = evaluate("hill_exp", [0.0, 1.0, self.shape_a, self.shape_b, self.shape_s], grid)
        scale = amplitude / (g.max() - g.min())
        return np.array([self.shape_c0, scale, self.shape_a, self.shape_b, self.shape_s])


@dataclass
class PowerResult:
    power: dict[str, dict[int, float]]
    reps: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "reps": self.reps,
            "seed": self.seed,
            "power": {tier: {str(b): p for b, p in row.items()} for tier, row in self.power.items()},
        }


def _power_rep(task, grid: PowerGrid, pipeline: PipelineConfig, seed: int) -> bool:
    tier_idx, bin_size, rep, params = task
    ss = np.random.SeedSequence([seed, tier_idx, bin_size, rep])
    rng = np.random.default_rng(ss)
    exposures = np.arange(1, grid.n_bins + 1)
    probs = evaluate("hill_exp", params, exposures.astype(float))
    means = rng.binomial(bin_size, probs) / bin_size
    curve = BinnedCurve(
        exposures=exposures, means=means, counts=np.full(grid.n_bins, bin_size)
    )
    perm_seed = int(ss.generate_state(1)[0])
    outcome = classify_curve(curve, pipeline, series=None, seed=perm_seed)
    return outcome.label.label in ("A_strong", "B_moderate")


def power_analysis(
    grid: PowerGrid,
    pipeline: PipelineConfig,
    seed: int = 0,
    jobs: int = 1,
) -> PowerResult:
    """Detection power per (amplitude tier, bin size) cell.

    Each replicate samples binomial bin means from the tier curve, runs the
    aggregate classification pipeline, and counts the fraction labelled
    inverted-U (A or B).
    """
    if grid.reps < 10:
        raise ValueError("reps must be >= 10")
    tasks = []
    for tier_idx, (_, amplitude) in enumerate(grid.amplitudes):
        params = grid.tier_params(amplitude)
        for bin_size in grid.bin_sizes:
            for rep in range(grid.reps):
                tasks.append((tier_idx, bin_size, rep, params))

    detections = parallel_map(
        partial(_power_rep, grid=grid, pipeline=pipeline, seed=seed), tasks, jobs
    )

    power: dict[str, dict[int, float]] = {}
    for (tier_idx, bin_size, _, _), detected in zip(tasks, detections):
        tier = grid.amplitudes[tier_idx][0]
        row = power.setdefault(tier, {b: 0.0 for b in grid.bin_sizes})
        row[bin_size] += detected / grid.reps
    return PowerResult(power=power, reps=grid.reps, seed=seed)


# Aggregate-methodology scenarios: six populations whose correct aggregate
# labels are known by construction.  Amplitudes reuse the power-grid tiers;
# population size controls the bin-level noise.
SCENARIOS = (
    "strong_inverted_u",
    "weak_inverted_u",
    "noisy_inverted_u",
    "mixed",
    "monotonic",
    "flat",
)


def _curve_users(
    kind: str,
    params: Sequence[float],
    n_users: int,
    length: int,
    seed: int,
    tag: str,
) -> list[ExposureSeries]:
    exposures = np.arange(1, length + 1, dtype=float)
    probs = evaluate(kind, params, exposures)
    users = []
    for i in range(n_users):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        engagement = (rng.random(length) < probs).astype(np.int8)
        users.append(ExposureSeries(f"{tag}_{i:05d}", tag, engagement))
    return users


def scenario_population(name: str, seed: int = 0) -> list[ExposureSeries]:
    """Population of user series realizing one known aggregate shape."""
    grid = PowerGrid()
    if name == "strong_inverted_u":
        return _curve_users("hill_exp", grid.tier_params(0.18), 400, 60, seed, name)
    if name == "weak_inverted_u":
        return _curve_users("hill_exp", grid.tier_params(0.10), 400, 60, seed, name)
    if name == "noisy_inverted_u":
        return _curve_users("hill_exp", grid.tier_params(0.18), 80, 60, seed, name)
    if name == "mixed":
        third = generate_null_users("inverted_u", 50, seed=seed)
        third += generate_null_users("monotonic", 50, seed=seed + 1)
        third += generate_null_users("flat", 50, seed=seed + 2)
        return third
    if name == "monotonic":
        return _curve_users("monotonic_decay", [0.3, 0.25, 20.0], 400, 60, seed, name)
    if name == "flat":
        return _curve_users("flat", [0.45], 400, 60, seed, name)
    raise ValueError(f"unknown scenario {name!r}; expected one of {SCENARIOS}")
