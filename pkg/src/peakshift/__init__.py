"""peakshift: aggregation-distortion analysis for engagement curves.

Fits parametric curiosity curves at individual and population granularity,
classifies curve shapes with calibrated false-positive control, quantifies
how far the aggregate peak drifts from the typical individual peak, and
provides empirical-Bayes pooling of per-user peak estimates.  A synthetic
lab generates populations with known ground truth for validation and power
analysis.
"""

from .classify import (
    AggregateGates,
    CalibrationReport,
    NullGeneratorConfig,
    PipelineConfig,
    StrictGates,
    classify_aggregate,
    classify_curve,
    classify_population,
    classify_user_strict,
    prevalence_bounds,
    run_user_pipeline,
    snc_calibrate,
)
from .data import (
    BinnedCurve,
    ExposureSeries,
    InteractionEvent,
    MovingAverageSmoother,
    SmoothedSeries,
    aggregate_curve,
    build_exposure_series,
    ingest_events,
    moving_average,
    series_from_csv,
    series_to_csv,
    smooth_series,
)
from .diagnostics import (
    SelectionSummary,
    distortion_factor,
    nonparametric_distortion_check,
    pooled_distortion,
    selection_identity_check,
    within_user_permutation,
)
from .fitting import (
    CurveFitter,
    FitConfig,
    FitResult,
    ascent_significance,
    bootstrap_fit,
    compare_lrt,
    fit_all_models,
    fit_curve,
    oos_r2,
    permutation_curve_test,
    permutation_fit_test,
)
from .models import (
    MODELS,
    HillExpParams,
    PeakLocation,
    decline_fraction,
    evaluate,
    peak_location,
)
from .shrinkage import (
    PeakObservation,
    PopulationPrior,
    estimate_obs_uncertainty,
    fit_prior,
    hierarchical_peak,
    shrink,
)
from .synth import (
    FactorialConfig,
    PowerGrid,
    generate_null_users,
    generate_population,
    power_analysis,
    run_factorial,
    scenario_population,
    solve_half_max,
)

__version__ = "0.1.0"
