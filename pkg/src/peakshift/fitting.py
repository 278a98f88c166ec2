"""Bounded nonlinear least-squares fitting and model-comparison statistics.

The optimizer is a multi-start Nelder-Mead simplex running in an unbounded
space: each parameter is mapped through a logistic squashing of the box
constraint, so the simplex can roam freely while every candidate stays
inside bounds.  Starts come from a Latin-hypercube draw (log-spaced for
scale parameters), which handles the multimodal surfaces these curve
families produce.  Flat and quadratic families have exact weighted
least-squares solutions and skip the simplex entirely.

Everything is deterministic given (data, config): the start layout depends
only on the config seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit, logit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted, column_or_1d

from .data import BinnedCurve, ExposureSeries, aggregate_curve
from .models import MODELS, PeakLocation, evaluate, peak_location

__all__ = [
    "FitConfig",
    "FitResult",
    "CurveFitter",
    "fit_curve",
    "fit_all_models",
    "compare_lrt",
    "oos_r2",
    "bootstrap_fit",
    "BootstrapResult",
    "ascent_significance",
    "AscentResult",
    "permutation_fit_test",
    "permutation_curve_test",
    "PermutationFitResult",
]

_SSE_FLOOR = 1e-12


@dataclass(frozen=True)
class FitConfig:
    """Knobs for one curve fit.

    ``bounds`` overrides individual parameter boxes by name (e.g.
    ``{"s": (1, 200)}``); unnamed parameters keep the family defaults.
    ``tol`` is the relative SSE convergence tolerance handed to the simplex.
    """

    n_starts: int = 16
    max_iter: int = 1000
    tol: float = 1e-10
    seed: int = 0
    grid_step: float = 0.25
    bounds: Mapping[str, tuple[float, float]] | None = None

    def __post_init__(self) -> None:
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.bounds:
            for name, (lo, hi) in self.bounds.items():
                if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                    raise ValueError(f"bounds for {name!r} must be finite and ordered")


@dataclass(frozen=True)
class FitResult:
    """One fitted curve with its goodness-of-fit statistics.

    ``aic``/``bic`` count the family's parameters plus one for the noise
    variance.  ``peak`` is located on the data's exposure domain.
    """

    kind: str
    params: np.ndarray
    param_names: tuple[str, ...]
    sse: float
    r2: float
    log_likelihood: float
    aic: float
    bic: float
    n_obs: int
    peak: PeakLocation
    converged: bool

    def params_dict(self) -> dict[str, float]:
        return {name: float(v) for name, v in zip(self.param_names, self.params)}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": self.params_dict(),
            "sse": self.sse,
            "r2": self.r2,
            "log_likelihood": self.log_likelihood,
            "aic": self.aic,
            "bic": self.bic,
            "n_obs": self.n_obs,
            "peak": self.peak.to_dict(),
            "converged": self.converged,
        }


def _resolve_bounds(kind: str, config: FitConfig) -> np.ndarray:
    spec = MODELS[kind]
    bounds = np.array(spec.default_bounds, dtype=float)
    if config.bounds:
        for i, name in enumerate(spec.param_names):
            if name in config.bounds:
                bounds[i] = config.bounds[name]
    return bounds


def _prepare_data(n, y, sample_weight):
    n = column_or_1d(np.asarray(n, dtype=float))
    y = column_or_1d(np.asarray(y, dtype=float))
    if n.shape != y.shape:
        raise ValueError("n and y must have the same length")
    if np.any(n < 0):
        raise ValueError("exposure counts must be >= 0")
    if sample_weight is None:
        w = np.ones_like(y)
    else:
        w = column_or_1d(np.asarray(sample_weight, dtype=float))
        if w.shape != y.shape:
            raise ValueError("sample_weight must match y")
        if np.any(w < 0):
            raise ValueError("weights must be >= 0")
    if w.sum() <= 0:
        raise ValueError("at least one positive weight required")
    return n, y, w


def _gaussian_loglik(sse: float, n_obs: int) -> float:
    sse = max(sse, _SSE_FLOOR)
    return -0.5 * n_obs * (np.log(2.0 * np.pi * sse / n_obs) + 1.0)


def _start_points(bounds: np.ndarray, log_scale: Sequence[bool], config: FitConfig) -> np.ndarray:
    """Latin-hypercube starts in parameter space, log-spaced for scale params."""
    k = len(bounds)
    sampler = stats.qmc.LatinHypercube(d=k, seed=config.seed)
    u = sampler.random(config.n_starts)
    u = np.clip(u, 1e-3, 1.0 - 1e-3)
    starts = np.empty_like(u)
    for j in range(k):
        lo, hi = bounds[j]
        if log_scale[j] and lo > 0:
            starts[:, j] = lo * (hi / lo) ** u[:, j]
        else:
            starts[:, j] = lo + (hi - lo) * u[:, j]
    return starts


# short-run budget for scouting every start before polishing the best basins
_EXPLORE_ITER = 150
_POLISH_TOP = 4


def _nelder_mead(
    f: Callable[[np.ndarray], float],
    x0: np.ndarray,
    step: float,
    max_iter: int,
    rel_tol: float,
) -> tuple[np.ndarray, float, bool]:
    """Nelder-Mead simplex descent (reflect/expand/contract/shrink).

    Converged when the simplex function values collapse to within
    ``rel_tol`` relative spread.  Returns (best x, best f, converged).
    """
    k = x0.size
    simplex = np.tile(x0, (k + 1, 1))
    for j in range(k):
        simplex[j + 1, j] += step
    fv = np.array([f(x) for x in simplex])
    converged = False
    for _ in range(max_iter):
        order = np.argsort(fv, kind="stable")
        simplex, fv = simplex[order], fv[order]
        if fv[-1] - fv[0] <= rel_tol * (1.0 + abs(fv[0])):
            converged = True
            break
        centroid = simplex[:-1].mean(axis=0)
        xr = 2.0 * centroid - simplex[-1]
        fr = f(xr)
        if fr < fv[0]:
            xe = centroid + 2.0 * (centroid - simplex[-1])
            fe = f(xe)
            if fe < fr:
                simplex[-1], fv[-1] = xe, fe
            else:
                simplex[-1], fv[-1] = xr, fr
        elif fr < fv[-2]:
            simplex[-1], fv[-1] = xr, fr
        else:
            if fr < fv[-1]:  # outside contraction
                xc = centroid + 0.5 * (xr - centroid)
                fc = f(xc)
                accept = fc <= fr
            else:  # inside contraction
                xc = centroid + 0.5 * (simplex[-1] - centroid)
                fc = f(xc)
                accept = fc < fv[-1]
            if accept:
                simplex[-1], fv[-1] = xc, fc
            else:
                simplex[1:] = simplex[0] + 0.5 * (simplex[1:] - simplex[0])
                fv[1:] = [f(x) for x in simplex[1:]]
    best = int(np.argmin(fv))
    return simplex[best], float(fv[best]), converged


def _multistart_minimize(
    objective: Callable[[np.ndarray], float],
    z_starts: np.ndarray,
    config: FitConfig,
) -> tuple[np.ndarray, float, bool]:
    """Short exploration run from every start, full polish of the best basins."""
    explored = []
    for z0 in z_starts:
        x, fx, _ = _nelder_mead(objective, z0, 0.6, _EXPLORE_ITER, config.tol)
        explored.append((fx, x))
    order = np.argsort([e[0] for e in explored], kind="stable")
    best_x, best_f, converged = None, np.inf, False
    for idx in order[: _POLISH_TOP]:
        x, fx, conv = _nelder_mead(objective, explored[idx][1], 0.25, config.max_iter, config.tol)
        if fx < best_f:
            best_x, best_f, converged = x, fx, conv
        elif fx == best_f and conv:
            converged = True
    return best_x, best_f, converged


def _fit_flat(n, y, w) -> tuple[np.ndarray, float, bool]:
    c0 = float(np.clip(np.sum(w * y) / np.sum(w), 0.0, 1.0))
    resid = y - c0
    return np.array([c0]), float(np.sum(w * resid * resid)), True


def _fit_quadratic(n, y, w) -> tuple[np.ndarray, float, bool]:
    design = np.column_stack([np.ones_like(n), n, n * n])
    sw = np.sqrt(w)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], y * sw, rcond=None)
    resid = y - design @ coef
    return coef, float(np.sum(w * resid * resid)), True


def fit_curve(
    n,
    y,
    kind: str = "hill_exp",
    config: FitConfig | None = None,
    sample_weight=None,
) -> FitResult:
    """Fit one curve family by weighted least squares.

    Requires at least k + 2 observations for a k-parameter family.  The best
    of ``config.n_starts`` simplex runs wins; when no start converges the
    best-effort parameters are returned with ``converged=False``.
    """
    config = config or FitConfig()
    spec = MODELS[kind]
    n, y, w = _prepare_data(n, y, sample_weight)
    m = len(y)
    if m < spec.k + 2:
        raise ValueError(f"{kind} needs at least {spec.k + 2} observations, got {m}")

    if kind == "flat":
        params, sse, converged = _fit_flat(n, y, w)
    elif kind == "quadratic":
        params, sse, converged = _fit_quadratic(n, y, w)
    else:
        bounds = _resolve_bounds(kind, config)
        lo, hi = bounds[:, 0], bounds[:, 1]
        span = hi - lo
        fn = spec.fn

        def objective(z: np.ndarray) -> float:
            resid = y - fn(n, lo + span * expit(z))
            return float(np.dot(w * resid, resid))

        starts = _start_points(bounds, spec.log_scale, config)
        z_starts = logit(np.clip((starts - lo) / span, 1e-6, 1.0 - 1e-6))
        best_z, sse, converged = _multistart_minimize(objective, z_starts, config)
        params = lo + span * expit(best_z)

    wmean = np.sum(w * y) / np.sum(w)
    tss = float(np.sum(w * (y - wmean) ** 2))
    r2 = 1.0 - sse / tss if tss > 0 else 0.0
    loglik = _gaussian_loglik(sse, m)
    k_eff = spec.k + 1  # + noise variance
    peak = peak_location(kind, params, (float(n.min()), float(n.max())), config.grid_step)
    return FitResult(
        kind=kind,
        params=np.asarray(params, dtype=float),
        param_names=spec.param_names,
        sse=sse,
        r2=float(r2),
        log_likelihood=float(loglik),
        aic=float(2.0 * k_eff - 2.0 * loglik),
        bic=float(k_eff * np.log(m) - 2.0 * loglik),
        n_obs=m,
        peak=peak,
        converged=converged,
    )


def fit_all_models(
    n,
    y,
    config: FitConfig | None = None,
    sample_weight=None,
    kinds: Sequence[str] | None = None,
) -> dict[str, FitResult]:
    """Fit every requested family (default: all seven) to the same data.

    Families with too few observations for their parameter count are skipped.
    """
    results: dict[str, FitResult] = {}
    for kind in kinds if kinds is not None else MODELS:
        try:
            results[kind] = fit_curve(n, y, kind, config, sample_weight)
        except ValueError:
            continue
    return results


class CurveFitter(BaseEstimator):
    """Scikit-learn style estimator wrapping :func:`fit_curve`.

    Parameters mirror :class:`FitConfig`; fitted statistics land in the
    usual trailing-underscore attributes and ``predict`` evaluates the
    fitted curve.
    """

    def __init__(
        self,
        model: str = "hill_exp",
        n_starts: int = 16,
        max_iter: int = 1000,
        tol: float = 1e-10,
        random_state: int = 0,
        grid_step: float = 0.25,
        bounds: Mapping[str, tuple[float, float]] | None = None,
    ):
        self.model = model
        self.n_starts = n_starts
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state
        self.grid_step = grid_step
        self.bounds = bounds

    def _config(self) -> FitConfig:
        return FitConfig(
            n_starts=self.n_starts,
            max_iter=self.max_iter,
            tol=self.tol,
            seed=self.random_state,
            grid_step=self.grid_step,
            bounds=self.bounds,
        )

    def fit(self, X, y, sample_weight=None):
        result = fit_curve(X, y, self.model, self._config(), sample_weight)
        self.result_ = result
        self.params_ = result.params
        self.param_names_ = result.param_names
        self.sse_ = result.sse
        self.r2_ = result.r2
        self.aic_ = result.aic
        self.bic_ = result.bic
        self.peak_ = result.peak
        self.converged_ = result.converged
        self.n_obs_ = result.n_obs
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return evaluate(self.model, self.params_, np.asarray(X, dtype=float))


# (full, restricted) -> chi-square degrees of freedom for the designated nestings
_NESTED_DF = {
    ("hill_exp", "monotonic_decay"): 2,
    ("hill_exp", "flat"): 4,
}


def compare_lrt(full: FitResult, restricted: FitResult) -> float:
    """Likelihood-ratio p-value for a designated nested pair.

    Statistic n * ln(sse_restricted / sse_full) against the chi-square upper
    tail; a full-model SSE above the restricted one clamps the statistic to 0
    (p = 1) so numerical noise never produces NaN.
    """
    try:
        df = _NESTED_DF[(full.kind, restricted.kind)]
    except KeyError:
        raise ValueError(
            f"no designated nesting for {full.kind!r} over {restricted.kind!r}"
        ) from None
    if full.n_obs != restricted.n_obs:
        raise ValueError("fits compare different numbers of observations")
    sse_full = max(full.sse, _SSE_FLOOR)
    sse_restricted = max(restricted.sse, _SSE_FLOOR)
    lam = full.n_obs * np.log(sse_restricted / sse_full)
    if lam <= 0:
        return 1.0
    return float(stats.chi2.sf(lam, df))


def oos_r2(
    n,
    y,
    kind: str = "hill_exp",
    config: FitConfig | None = None,
    sample_weight=None,
) -> float:
    """Out-of-sample R^2 on every 5th observation (1-based), held out.

    The model is fit on the remaining points and scored against the held-out
    weighted mean; values can be negative when the fit captures noise.
    """
    n, y, w = _prepare_data(n, y, sample_weight)
    if len(y) < 5:
        raise ValueError("need at least 5 observations for a holdout")
    order = np.argsort(n, kind="stable")
    n, y, w = n[order], y[order], w[order]
    held = (np.arange(1, len(y) + 1) % 5) == 0
    fit = fit_curve(n[~held], y[~held], kind, config, w[~held])
    pred = evaluate(kind, fit.params, n[held])
    yh, wh = y[held], w[held]
    mean_h = np.sum(wh * yh) / np.sum(wh)
    tss = float(np.sum(wh * (yh - mean_h) ** 2))
    rss = float(np.sum(wh * (yh - pred) ** 2))
    if tss <= 0:
        return 0.0 if rss <= _SSE_FLOOR else -np.inf
    return float(1.0 - rss / tss)


@dataclass(frozen=True)
class BootstrapResult:
    statistic: str
    samples: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    n_valid: int
    n_failed: int
    correlations: np.ndarray | None = None

    def to_dict(self) -> dict:
        return {
            "statistic": self.statistic,
            "ci_low": self.ci_low.tolist(),
            "ci_high": self.ci_high.tolist(),
            "n_valid": self.n_valid,
            "n_failed": self.n_failed,
        }


def bootstrap_fit(
    n,
    y,
    kind: str = "hill_exp",
    config: FitConfig | None = None,
    sample_weight=None,
    n_boot: int = 200,
    statistic: str = "peak",
    seed: int = 0,
) -> BootstrapResult:
    """Percentile bootstrap over observations for a fitted-curve statistic.

    ``statistic="peak"`` collects interior peak locations; resamples without
    an interior peak count as failures.  ``statistic="params"`` collects the
    parameter vector (with the cross-parameter correlation matrix).  More
    than 50% failures aborts with "unstable fit".
    """
    if n_boot < 100:
        raise ValueError("n_boot must be >= 100")
    if statistic not in ("peak", "params"):
        raise ValueError("statistic must be 'peak' or 'params'")
    n, y, w = _prepare_data(n, y, sample_weight)
    m = len(y)
    samples = []
    n_failed = 0
    for b in range(n_boot):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        idx = rng.integers(0, m, m)
        try:
            fit = fit_curve(n[idx], y[idx], kind, config, w[idx])
        except (ValueError, FloatingPointError):
            n_failed += 1
            continue
        if statistic == "peak":
            if fit.peak.n_star is None or not fit.peak.interior:
                n_failed += 1
                continue
            samples.append(fit.peak.n_star)
        else:
            if not fit.converged:
                n_failed += 1
                continue
            samples.append(fit.params)
    if n_failed > n_boot / 2:
        raise ValueError(f"unstable fit: {n_failed}/{n_boot} bootstrap resamples failed")
    arr = np.asarray(samples, dtype=float)
    ci_low, ci_high = np.percentile(arr, [2.5, 97.5], axis=0)
    corr = None
    if statistic == "params" and arr.ndim == 2 and len(arr) > 2:
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.corrcoef(arr, rowvar=False)
    return BootstrapResult(
        statistic=statistic,
        samples=arr,
        ci_low=np.atleast_1d(ci_low),
        ci_high=np.atleast_1d(ci_high),
        n_valid=len(arr),
        n_failed=n_failed,
        correlations=corr,
    )


@dataclass(frozen=True)
class AscentResult:
    p_value: float
    n_prepeak: int
    insufficient: bool

    def to_dict(self) -> dict:
        return {
            "p_value": self.p_value,
            "n_prepeak": self.n_prepeak,
            "insufficient": self.insufficient,
        }


def ascent_significance(curve: BinnedCurve, n_star: float) -> AscentResult:
    """One-sided significance of the pre-peak rise.

    Ordinary least-squares slope on bins strictly before ``n_star``; p-value
    for slope > 0.  Fewer than 3 pre-peak bins yields p = 1 with the
    ``insufficient`` flag set (slope estimation is unreliable there).
    """
    mask = curve.exposures < n_star
    x = curve.exposures[mask].astype(float)
    yv = curve.means[mask]
    if len(x) < 3:
        return AscentResult(1.0, int(len(x)), True)
    res = stats.linregress(x, yv)
    if not np.isfinite(res.pvalue):
        # perfectly collinear segment: infinite t for any nonzero slope
        if res.slope > 0:
            return AscentResult(0.0, int(len(x)), False)
        if res.slope < 0:
            return AscentResult(1.0, int(len(x)), False)
        return AscentResult(0.5, int(len(x)), False)
    p_one = res.pvalue / 2.0 if res.slope > 0 else 1.0 - res.pvalue / 2.0
    return AscentResult(float(p_one), int(len(x)), False)


@dataclass(frozen=True)
class PermutationFitResult:
    p_value: float
    observed_r2: float
    n_permutations: int
    null_r2_mean: float

    def to_dict(self) -> dict:
        return {
            "p_value": self.p_value,
            "observed_r2": self.observed_r2,
            "n_permutations": self.n_permutations,
            "null_r2_mean": self.null_r2_mean,
        }


def permutation_fit_test(
    series: Sequence[ExposureSeries],
    n_permutations: int = 500,
    seed: int = 0,
    config: FitConfig | None = None,
    kind: str = "hill_exp",
    max_exposure: int | None = None,
    min_bin_count: int = 1,
    null_config: FitConfig | None = None,
) -> PermutationFitResult:
    """Permutation null for the aggregate-curve fit quality.

    Each permutation shuffles every user's engagement values across their own
    exposure indices (destroying any exposure structure while preserving each
    user's mean), rebuilds the aggregate curve, and refits.  The p-value is
    the fraction of permuted fits with R^2 at or above the observed one.
    ``null_config`` lets callers run the permuted refits with a lighter
    budget.
    """
    if n_permutations < 100:
        raise ValueError("n_permutations must be >= 100")
    curve = aggregate_curve(series, max_exposure=max_exposure, min_bin_count=min_bin_count)
    observed = fit_curve(curve.exposures, curve.means, kind, config, curve.counts)
    null_cfg = null_config or config
    exceed = 0
    null_sum = 0.0
    for b in range(n_permutations):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        permuted = [
            ExposureSeries(
                user_id=s.user_id,
                group=s.group,
                engagement=rng.permutation(s.engagement),
                raw_ratings=s.raw_ratings,
            )
            for s in series
        ]
        pcurve = aggregate_curve(permuted, max_exposure=max_exposure, min_bin_count=min_bin_count)
        pfit = fit_curve(pcurve.exposures, pcurve.means, kind, null_cfg, pcurve.counts)
        null_sum += pfit.r2
        if pfit.r2 >= observed.r2:
            exceed += 1
    return PermutationFitResult(
        p_value=exceed / n_permutations,
        observed_r2=observed.r2,
        n_permutations=n_permutations,
        null_r2_mean=null_sum / n_permutations,
    )


def permutation_curve_test(
    curve: BinnedCurve,
    n_permutations: int = 500,
    seed: int = 0,
    config: FitConfig | None = None,
    kind: str = "hill_exp",
    null_config: FitConfig | None = None,
) -> PermutationFitResult:
    """Bin-level permutation null: shuffle (mean, count) pairs across exposures.

    Used when the aggregate curve is the finest structure available (no
    per-user series), e.g. for bin-sampled synthetic data.
    """
    if n_permutations < 100:
        raise ValueError("n_permutations must be >= 100")
    observed = fit_curve(curve.exposures, curve.means, kind, config, curve.counts)
    null_cfg = null_config or config
    exceed = 0
    null_sum = 0.0
    for b in range(n_permutations):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        perm = rng.permutation(len(curve.means))
        pfit = fit_curve(
            curve.exposures, curve.means[perm], kind, null_cfg, curve.counts[perm]
        )
        null_sum += pfit.r2
        if pfit.r2 >= observed.r2:
            exceed += 1
    return PermutationFitResult(
        p_value=exceed / n_permutations,
        observed_r2=observed.r2,
        n_permutations=n_permutations,
        null_r2_mean=null_sum / n_permutations,
    )
