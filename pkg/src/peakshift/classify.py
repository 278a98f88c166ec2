"""Curve-shape classification at aggregate and per-user granularity.

Aggregate curves get a five-level label (A strong inverted-U down to E no
fit) from a conjunction of fit-quality, model-selection, and shape gates.
Individual users face a stricter six-gate conjunction designed to make the
decay component earn its keep against the saturating alternative.

Because a flexible five-parameter curve happily fits smoothed Bernoulli
noise, per-user classification rates mean nothing without a false-positive
baseline.  ``snc_calibrate`` provides one: it pushes generated monotonic,
flat, and true inverted-U users through the *identical* pipeline and
reports false/true positive rates, selectivity, and the excess of an
observed rate over the null rate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import partial
from typing import Mapping, Sequence

import numpy as np

from ._parallel import parallel_map
from .data import BinnedCurve, ExposureSeries, SmoothedSeries, aggregate_curve, smooth_series
from .fitting import (
    AscentResult,
    FitConfig,
    FitResult,
    ascent_significance,
    compare_lrt,
    fit_all_models,
    oos_r2,
    permutation_curve_test,
    permutation_fit_test,
)
from .models import decline_fraction

__all__ = [
    "AggregateGates",
    "StrictGates",
    "PipelineConfig",
    "AggregateDiagnostics",
    "AggregateClass",
    "StrictGateReport",
    "UserOutcome",
    "classify_aggregate",
    "classify_user_strict",
    "run_user_pipeline",
    "classify_population",
    "classify_curve",
    "NullGeneratorConfig",
    "CalibrationReport",
    "snc_calibrate",
    "PrevalenceBounds",
    "prevalence_bounds",
]

AGGREGATE_LABELS = ("A_strong", "B_moderate", "C_weak", "D_monotonic", "E_no_fit")


@dataclass(frozen=True)
class AggregateGates:
    """Thresholds for the aggregate A-class conjunction."""

    r2_min: float = 0.4
    lrt_alpha: float = 0.05
    delta_aic_min: float = 4.0
    ascent_alpha: float = 0.05
    permutation_alpha: float = 0.05
    oos_min: float = 0.0
    decline_min: float = 0.10
    # E when every family fits worse than this
    e_r2_floor: float = 0.1


@dataclass(frozen=True)
class StrictGates:
    """Thresholds for the per-user six-gate conjunction.

    ``use_decline`` / ``use_purehill_bic`` switch individual gates off to
    reproduce weaker classifier variants for calibration comparisons.
    """

    lrt_alpha: float = 0.05
    delta_aic_min: float = 2.0
    r2_min: float = 0.05
    peak_min: float = 2.0
    decline_min: float = 0.10
    use_decline: bool = True
    use_purehill_bic: bool = True


USER_MODELS = ("hill_exp", "monotonic_decay", "pure_hill")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything the preprocessing + fit + classify chain needs.

    The same object drives real ingested data, null calibration, and the
    synthetic lab, which is what makes calibration results transferable.
    """

    threshold: float = 4.0
    smoothing_window: int = 5
    min_raw_length: int = 15
    min_smoothed_length: int = 19
    fit: FitConfig = FitConfig()
    strict: StrictGates = StrictGates()
    aggregate: AggregateGates = AggregateGates()
    max_exposure: int | None = None
    min_bin_count: int = 1
    permutations: int = 500
    permutation_null_fit: FitConfig | None = None
    user_models: tuple[str, ...] = USER_MODELS


@dataclass(frozen=True)
class AggregateDiagnostics:
    oos_r2: float
    ascent_p: float
    permutation_p: float
    decline: float

    def to_dict(self) -> dict:
        return {
            "oos_r2": self.oos_r2,
            "ascent_p": self.ascent_p,
            "permutation_p": self.permutation_p,
            "decline": self.decline,
        }


@dataclass
class AggregateClass:
    label: str
    gate_report: dict[str, dict]

    def to_dict(self) -> dict:
        return {"label": self.label, "gates": self.gate_report}


def _aic_winner(fits: Mapping[str, FitResult]) -> str:
    return min(fits, key=lambda k: fits[k].aic)


def classify_aggregate(
    fits: Mapping[str, FitResult],
    curve: BinnedCurve,
    diagnostics: AggregateDiagnostics,
    gates: AggregateGates | None = None,
) -> AggregateClass:
    """Assign the A-E label to an aggregate curve.

    A requires all eight gates; B tolerates one failure among the ascent and
    permutation gates; C is an AIC win for the peaked-decay family whose fit
    quality does not generalize; D is an AIC win for a monotone family; E is
    the fallback when nothing fits.
    """
    gates = gates or AggregateGates()
    hill = fits.get("hill_exp")
    mono = fits.get("monotonic_decay")

    if hill is None or not hill.converged:
        return AggregateClass("E_no_fit", {"reason": {"value": "hill_exp fit unavailable"}})

    lrt_p = compare_lrt(hill, mono) if mono is not None else 1.0
    delta_aic = (mono.aic - hill.aic) if mono is not None else -np.inf
    quad = fits.get("quadratic")
    beats_quadratic = quad is not None and hill.aic < quad.aic

    checks = {
        "r2": (hill.r2, hill.r2 > gates.r2_min),
        "lrt_p": (lrt_p, lrt_p < gates.lrt_alpha),
        "delta_aic": (delta_aic, delta_aic > gates.delta_aic_min),
        "beats_quadratic": (hill.aic - (quad.aic if quad else np.nan), beats_quadratic),
        "permutation_p": (
            diagnostics.permutation_p,
            diagnostics.permutation_p < gates.permutation_alpha,
        ),
        "oos_r2": (diagnostics.oos_r2, diagnostics.oos_r2 > gates.oos_min),
        "decline": (diagnostics.decline, diagnostics.decline > gates.decline_min),
        "ascent_p": (diagnostics.ascent_p, diagnostics.ascent_p < gates.ascent_alpha),
    }
    report = {name: {"value": float(v), "passed": bool(ok)} for name, (v, ok) in checks.items()}

    if all(not f.converged for f in fits.values()) or all(
        f.r2 < gates.e_r2_floor for f in fits.values()
    ):
        return AggregateClass("E_no_fit", report)

    failed = [name for name, (_, ok) in checks.items() if not ok]
    if not failed:
        return AggregateClass("A_strong", report)
    if all(name in ("ascent_p", "permutation_p") for name in failed) and len(failed) <= 1:
        return AggregateClass("B_moderate", report)

    winner = _aic_winner(fits)
    report["aic_winner"] = {"value": winner, "passed": winner == "hill_exp"}
    if (
        winner == "hill_exp"
        and diagnostics.decline > gates.decline_min
        and (hill.r2 <= gates.r2_min or diagnostics.oos_r2 <= gates.oos_min)
    ):
        return AggregateClass("C_weak", report)
    if winner in ("monotonic_decay", "pure_hill"):
        return AggregateClass("D_monotonic", report)
    return AggregateClass("E_no_fit", report)


@dataclass
class StrictGateReport:
    """Per-user gate values and verdict; all values populated even when an
    early gate fails, so calibration can attribute failures."""

    user_id: str
    group: str
    lrt_p: float
    delta_aic_vs_monotonic: float
    r2: float
    n_star: float | None
    interior: bool
    decline: float
    hillexp_bic: float
    purehill_bic: float
    passed: bool
    failure_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "group": self.group,
            "lrt_p": self.lrt_p,
            "delta_aic_vs_monotonic": self.delta_aic_vs_monotonic,
            "r2": self.r2,
            "n_star": self.n_star,
            "interior": self.interior,
            "decline": self.decline,
            "hillexp_bic": self.hillexp_bic,
            "purehill_bic": self.purehill_bic,
            "passed": self.passed,
            "failure_reason": self.failure_reason,
        }


def classify_user_strict(
    fits: Mapping[str, FitResult],
    smoothed: SmoothedSeries,
    gates: StrictGates | None = None,
) -> StrictGateReport:
    """Evaluate the six-gate per-user conjunction on the fitted models.

    Gates: LRT vs monotonic decay, AIC margin vs monotonic decay, minimum
    R^2, interior peak beyond the opening exposures, post-peak decline, and
    a BIC win over the saturating (pure Hill) family.
    """
    gates = gates or StrictGates()
    hill = fits.get("hill_exp")
    mono = fits.get("monotonic_decay")
    pure = fits.get("pure_hill")
    if hill is None or mono is None or pure is None:
        missing = [k for k in USER_MODELS if k not in fits]
        return StrictGateReport(
            user_id=smoothed.user_id,
            group=smoothed.group,
            lrt_p=1.0,
            delta_aic_vs_monotonic=float("-inf"),
            r2=0.0,
            n_star=None,
            interior=False,
            decline=0.0,
            hillexp_bic=float("inf"),
            purehill_bic=float("inf"),
            passed=False,
            failure_reason=f"missing fits: {missing}",
        )

    lrt_p = compare_lrt(hill, mono)
    delta_aic = mono.aic - hill.aic
    n_star = hill.peak.n_star
    interior = hill.peak.interior
    n_end = float(len(smoothed))
    if n_star is not None and n_end > n_star:
        decline = decline_fraction("hill_exp", hill.params, n_star, n_end)
    else:
        decline = 0.0

    conditions = [
        lrt_p < gates.lrt_alpha,
        delta_aic > gates.delta_aic_min,
        hill.r2 > gates.r2_min,
        n_star is not None and n_star > gates.peak_min and interior,
    ]
    if gates.use_decline:
        conditions.append(decline > gates.decline_min)
    if gates.use_purehill_bic:
        conditions.append(hill.bic < pure.bic)

    return StrictGateReport(
        user_id=smoothed.user_id,
        group=smoothed.group,
        lrt_p=float(lrt_p),
        delta_aic_vs_monotonic=float(delta_aic),
        r2=float(hill.r2),
        n_star=n_star,
        interior=bool(interior),
        decline=float(decline),
        hillexp_bic=float(hill.bic),
        purehill_bic=float(pure.bic),
        passed=all(conditions),
        failure_reason="" if hill.converged else "hill_exp fit did not converge",
    )


@dataclass
class UserOutcome:
    """Result of the per-user pipeline: gate report plus the fits behind it."""

    user_id: str
    group: str
    report: StrictGateReport
    fits: dict[str, FitResult]
    smoothed_length: int

    @property
    def fitted_peak(self) -> float | None:
        peak = self.fits["hill_exp"].peak
        return peak.n_star if peak.interior else None


def run_user_pipeline(series: ExposureSeries, pipeline: PipelineConfig) -> UserOutcome | None:
    """Smooth, fit, and strictly classify one user's series.

    Returns None when the series fails the minimum-length gates (raw and
    smoothed lengths are independent thresholds; with length-preserving
    smoothing the larger one binds).
    """
    if len(series) < pipeline.min_raw_length:
        return None
    smoothed = smooth_series(series, pipeline.smoothing_window)
    if len(smoothed) < pipeline.min_smoothed_length:
        return None
    fits = fit_all_models(
        smoothed.exposures,
        smoothed.values,
        pipeline.fit,
        kinds=pipeline.user_models,
    )
    report = classify_user_strict(fits, smoothed, pipeline.strict)
    return UserOutcome(
        user_id=series.user_id,
        group=series.group,
        report=report,
        fits=fits,
        smoothed_length=len(smoothed),
    )


def classify_population(
    series: Sequence[ExposureSeries],
    pipeline: PipelineConfig,
    jobs: int = 1,
) -> list[UserOutcome | None]:
    """Run the per-user pipeline across a population (order-stable)."""
    return parallel_map(partial(run_user_pipeline, pipeline=pipeline), list(series), jobs)


@dataclass
class AggregateOutcome:
    label: AggregateClass
    curve: BinnedCurve
    fits: dict[str, FitResult]
    diagnostics: AggregateDiagnostics
    ascent: AscentResult

    def to_dict(self) -> dict:
        return {
            "classification": self.label.to_dict(),
            "diagnostics": self.diagnostics.to_dict(),
            "fits": {k: f.to_dict() for k, f in self.fits.items()},
        }


def classify_curve(
    curve: BinnedCurve,
    pipeline: PipelineConfig,
    series: Sequence[ExposureSeries] | None = None,
    seed: int = 0,
) -> AggregateOutcome:
    """Full aggregate pipeline for one curve: seven fits, diagnostics, label.

    When the underlying per-user ``series`` are available the permutation
    null shuffles within users; otherwise it shuffles bins of the curve.
    """
    fits = fit_all_models(curve.exposures, curve.means, pipeline.fit, curve.counts)
    hill = fits.get("hill_exp")

    oos = oos_r2(curve.exposures, curve.means, "hill_exp", pipeline.fit, curve.counts)
    if hill is not None and hill.peak.n_star is not None:
        ascent = ascent_significance(curve, hill.peak.n_star)
        n_end = float(curve.exposures.max())
        decline = (
            decline_fraction("hill_exp", hill.params, hill.peak.n_star, n_end)
            if n_end > hill.peak.n_star
            else 0.0
        )
    else:
        ascent = AscentResult(1.0, 0, True)
        decline = 0.0

    if series is not None:
        perm = permutation_fit_test(
            series,
            n_permutations=pipeline.permutations,
            seed=seed,
            config=pipeline.fit,
            max_exposure=pipeline.max_exposure,
            min_bin_count=pipeline.min_bin_count,
            null_config=pipeline.permutation_null_fit,
        )
    else:
        perm = permutation_curve_test(
            curve,
            n_permutations=pipeline.permutations,
            seed=seed,
            config=pipeline.fit,
            null_config=pipeline.permutation_null_fit,
        )

    diagnostics = AggregateDiagnostics(
        oos_r2=float(oos),
        ascent_p=ascent.p_value,
        permutation_p=perm.p_value,
        decline=float(decline),
    )
    label = classify_aggregate(fits, curve, diagnostics, pipeline.aggregate)
    return AggregateOutcome(label, curve, fits, diagnostics, ascent)


@dataclass(frozen=True)
class NullGeneratorConfig:
    """How calibration nulls are generated, including the preprocessing they
    are matched to.  The declared smoothing/threshold must equal the
    classification pipeline's; the mismatch error enforces the identical-
    pipeline requirement instead of assuming it."""

    length_min: int = 15
    length_max: int = 75
    lengths: tuple[int, ...] | None = None
    smoothing_window: int = 5
    threshold: float = 4.0


@dataclass
class CalibrationReport:
    fp_monotonic: float
    fp_flat: float
    tp_inverted_u: float
    selectivity: float | None
    excess: float | None
    observed_rate: float | None
    prevalence_point: float | None
    prevalence_interval: tuple[float, float] | None
    conditioning_warning: bool
    n_per_condition: int
    n_eligible: dict[str, int]
    seed: int

    def to_dict(self) -> dict:
        return {
            "fp_monotonic": self.fp_monotonic,
            "fp_flat": self.fp_flat,
            "tp_inverted_u": self.tp_inverted_u,
            "selectivity": self.selectivity,
            "excess": self.excess,
            "observed_rate": self.observed_rate,
            "prevalence_point": self.prevalence_point,
            "prevalence_interval": (
                list(self.prevalence_interval) if self.prevalence_interval else None
            ),
            "conditioning_warning": self.conditioning_warning,
            "n_per_condition": self.n_per_condition,
            "n_eligible": self.n_eligible,
            "seed": self.seed,
        }


def _pass_rate(outcomes: Sequence[UserOutcome | None]) -> tuple[float, int]:
    eligible = [o for o in outcomes if o is not None]
    if not eligible:
        return 0.0, 0
    return sum(o.report.passed for o in eligible) / len(eligible), len(eligible)


def snc_calibrate(
    generator: NullGeneratorConfig,
    pipeline: PipelineConfig,
    n_per_condition: int = 500,
    seed: int = 0,
    observed_rate: float | None = None,
    jobs: int = 1,
) -> CalibrationReport:
    """Synthetic null calibration of the strict per-user classifier.

    Generates ``n_per_condition`` monotonic, flat, and true inverted-U users,
    runs each through the identical preprocessing + fitting + classification
    chain, and reports the resulting false/true positive rates.  Rates are
    over users that pass the minimum-length gates.
    """
    if n_per_condition < 100:
        raise ValueError("n_per_condition must be >= 100")
    if generator.smoothing_window != pipeline.smoothing_window:
        raise ValueError(
            "generator and pipeline smoothing windows disagree "
            f"({generator.smoothing_window} vs {pipeline.smoothing_window}); "
            "calibration requires the identical pipeline"
        )
    if generator.threshold != pipeline.threshold:
        raise ValueError(
            "generator and pipeline engagement thresholds disagree "
            f"({generator.threshold} vs {pipeline.threshold}); "
            "calibration requires the identical pipeline"
        )

    from .synth import generate_null_users  # deferred: synth uses this module for power analysis

    rates: dict[str, float] = {}
    n_eligible: dict[str, int] = {}
    for offset, kind in enumerate(("monotonic", "flat", "inverted_u")):
        users = generate_null_users(
            kind,
            n_per_condition,
            length_range=(generator.length_min, generator.length_max),
            lengths=generator.lengths,
            seed=seed + offset * 1_000_003,
        )
        outcomes = classify_population(users, pipeline, jobs=jobs)
        rates[kind], n_eligible[kind] = _pass_rate(outcomes)

    fp_mono = rates["monotonic"]
    tp = rates["inverted_u"]
    selectivity = tp / fp_mono if fp_mono > 0 else None
    excess = observed_rate - fp_mono if observed_rate is not None else None
    point = interval = None
    warning = (tp - fp_mono) < 0.2
    if observed_rate is not None:
        bounds = prevalence_bounds(observed_rate, fp_mono, tp)
        point, interval, warning = bounds.point, bounds.interval, bounds.conditioning_warning

    return CalibrationReport(
        fp_monotonic=fp_mono,
        fp_flat=rates["flat"],
        tp_inverted_u=tp,
        selectivity=selectivity,
        excess=excess,
        observed_rate=observed_rate,
        prevalence_point=point,
        prevalence_interval=interval,
        conditioning_warning=warning,
        n_per_condition=n_per_condition,
        n_eligible=n_eligible,
        seed=seed,
    )


@dataclass(frozen=True)
class PrevalenceBounds:
    point: float | None
    interval: tuple[float, float]
    conditioning_warning: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "interval": list(self.interval),
            "conditioning_warning": self.conditioning_warning,
            "note": self.note,
        }


def prevalence_bounds(observed_rate: float, fpr: float, tpr: float) -> PrevalenceBounds:
    """Bound the true signal prevalence behind an observed classification rate.

    Point estimate (observed - FPR) / (TPR - FPR) when the classifier
    separates at all; the interval [max(0, observed - FPR), observed] is
    reported regardless.  A TPR-FPR margin under 0.2 flags the correction as
    ill-conditioned: small rate perturbations swing the point estimate
    wildly.
    """
    for name, value in (("observed_rate", observed_rate), ("fpr", fpr), ("tpr", tpr)):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"{name} must be in [0, 1], got {value}")
    interval = (max(0.0, observed_rate - fpr), observed_rate)
    margin = tpr - fpr
    if margin <= 0:
        return PrevalenceBounds(
            None, interval, True, "tpr <= fpr: no point estimate, interval only"
        )
    point = (observed_rate - fpr) / margin
    return PrevalenceBounds(point, interval, margin < 0.2)
