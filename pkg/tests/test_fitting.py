"""Fit engine: recovery, model comparison, bootstrap, permutation nulls."""

import numpy as np
import pytest
from scipy import stats

from peakshift import (
    CurveFitter,
    FitConfig,
    FitResult,
    ascent_significance,
    bootstrap_fit,
    compare_lrt,
    evaluate,
    fit_all_models,
    fit_curve,
    oos_r2,
    permutation_fit_test,
)
from peakshift.data import BinnedCurve, ExposureSeries, aggregate_curve
from peakshift.fitting import _gaussian_loglik, _resolve_bounds, _start_points
from peakshift.models import MODELS
from peakshift.synth import generate_null_users, scenario_population


def _noisy_curve(theta, length, seed, kind="hill_exp"):
    rng = np.random.default_rng(seed)
    n = np.arange(1, length + 1, dtype=float)
    y = evaluate(kind, theta, n) + rng.normal(0, 0.05, length)
    return n, y


class TestFitCurve:
    def test_noiseless_recovery(self, noiseless_curve, theta0):
        n, y = noiseless_curve
        fit = fit_curve(n, y, "hill_exp")
        grid = np.arange(1, 60.0005, 0.001)
        true_peak = grid[np.argmax(evaluate("hill_exp", theta0, grid))]
        assert fit.sse < 1e-8
        assert abs(fit.peak.n_star - true_peak) / true_peak < 0.05

    def test_flat_data_exact(self):
        n = np.arange(1, 11, dtype=float)
        fit = fit_curve(n, np.full(10, 0.4), "flat")
        assert fit.params[0] == pytest.approx(0.4)
        assert fit.sse == pytest.approx(0.0, abs=1e-15)

    def test_hill_matches_flat_on_flat_data(self):
        n = np.arange(1, 16, dtype=float)
        y = np.full(15, 0.4)
        flat = fit_curve(n, y, "flat")
        hill = fit_curve(n, y, "hill_exp")
        assert hill.sse <= flat.sse + 1e-6

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="at least"):
            fit_curve([1, 2, 3], [0.1, 0.2, 0.3], "hill_exp")

    def test_determinism(self):
        n, y = _noisy_curve([0.2, 0.3, 2, 8, 30], 40, seed=5)
        a = fit_curve(n, y, "hill_exp", FitConfig(seed=3))
        b = fit_curve(n, y, "hill_exp", FitConfig(seed=3))
        assert np.array_equal(a.params, b.params)
        assert a.sse == b.sse and a.aic == b.aic

    def test_quadratic_exact_on_quadratic_data(self):
        n = np.arange(1, 21, dtype=float)
        y = 0.1 + 0.02 * n - 0.0005 * n * n
        fit = fit_curve(n, y, "quadratic")
        assert fit.sse < 1e-20
        assert np.allclose(fit.params, [0.1, 0.02, -0.0005])

    def test_sse_beats_every_start(self, fast_fit):
        # the multi-start winner can never be worse than any initial point
        n, y = _noisy_curve([0.25, 0.3, 2, 10, 40], 50, seed=8)
        fit = fit_curve(n, y, "hill_exp", fast_fit)
        bounds = _resolve_bounds("hill_exp", fast_fit)
        starts = _start_points(bounds, MODELS["hill_exp"].log_scale, fast_fit)
        for p in starts:
            resid = y - evaluate("hill_exp", p, n)
            assert fit.sse <= resid @ resid + 1e-9

    def test_weighted_fit_prefers_heavy_bins(self):
        n = np.arange(1, 13, dtype=float)
        y = np.full(12, 0.3)
        y[-1] = 0.9  # outlier bin
        w = np.ones(12)
        w[-1] = 1e-6
        fit = fit_curve(n, y, "flat", sample_weight=w)
        assert fit.params[0] == pytest.approx(0.3, abs=1e-4)

    def test_stats_definitions(self):
        # r2, logL, AIC, BIC relationships per their definitions
        n, y = _noisy_curve([0.3, 0.25, 2, 6, 25], 40, seed=2)
        fit = fit_curve(n, y, "hill_exp")
        tss = np.sum((y - y.mean()) ** 2)
        assert fit.r2 == pytest.approx(1 - fit.sse / tss)
        k_eff = 6
        assert fit.aic == pytest.approx(2 * k_eff - 2 * fit.log_likelihood)
        assert fit.bic == pytest.approx(k_eff * np.log(40) - 2 * fit.log_likelihood)

    def test_nested_aic_gap_when_sse_equal(self):
        # equal SSE forces the AIC gap to be exactly the parameter-count gap
        n = np.arange(1, 21, dtype=float)
        y = np.full(20, 0.4)
        flat = fit_curve(n, y, "flat")
        hill = fit_curve(n, y, "hill_exp")
        ll_flat = _gaussian_loglik(flat.sse, 20)
        ll_hill = _gaussian_loglik(hill.sse, 20)
        delta_from_k = 2 * (MODELS["hill_exp"].k - MODELS["flat"].k)
        assert hill.aic - flat.aic == pytest.approx(
            delta_from_k - 2 * (ll_hill - ll_flat), abs=1e-6
        )

    def test_fit_all_models_skips_short(self):
        n = np.arange(1, 6, dtype=float)
        fits = fit_all_models(n, np.array([0.1, 0.2, 0.3, 0.2, 0.1]))
        assert "flat" in fits and "hill_exp" not in fits  # 5 points < 5+2


class TestCurveFitter:
    def test_sklearn_surface(self, noiseless_curve):
        n, y = noiseless_curve
        est = CurveFitter(model="hill_exp", n_starts=8)
        assert est.get_params()["model"] == "hill_exp"
        est.fit(n, y)
        pred = est.predict(n)
        assert np.max(np.abs(pred - y)) < 1e-3
        assert est.peak_.interior

    def test_predict_before_fit_raises(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            CurveFitter().predict([1.0, 2.0])

    def test_clone_compatible(self):
        from sklearn.base import clone

        est = CurveFitter(model="flat", n_starts=4)
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()


def _mk_result(kind, sse, n_obs):
    ll = _gaussian_loglik(sse, n_obs)
    k = MODELS[kind].k + 1
    from peakshift.models import PeakLocation

    return FitResult(
        kind=kind,
        params=np.zeros(MODELS[kind].k),
        param_names=MODELS[kind].param_names,
        sse=sse,
        r2=0.5,
        log_likelihood=ll,
        aic=2 * k - 2 * ll,
        bic=k * np.log(n_obs) - 2 * ll,
        n_obs=n_obs,
        peak=PeakLocation(None, False, None),
        converged=True,
    )


class TestCompareLrt:
    def test_identical_sse_gives_p_one(self):
        full = _mk_result("hill_exp", 1.0, 50)
        restricted = _mk_result("monotonic_decay", 1.0, 50)
        assert compare_lrt(full, restricted) == 1.0

    def test_chi_square_tail_oracle(self):
        # sse_restricted = e^2 * sse_full at n = 50 puts the statistic at 100
        full = _mk_result("hill_exp", 0.5, 50)
        restricted = _mk_result("monotonic_decay", 0.5 * np.e**2, 50)
        p = compare_lrt(full, restricted)
        assert p == pytest.approx(stats.chi2.sf(100.0, 2), rel=1e-10)
        assert p < 1e-20

    def test_numerical_noise_clamped(self):
        full = _mk_result("hill_exp", 1.0 + 1e-12, 50)
        restricted = _mk_result("monotonic_decay", 1.0, 50)
        p = compare_lrt(full, restricted)
        assert p == 1.0 and np.isfinite(p)

    def test_flat_nesting_df4(self):
        full = _mk_result("hill_exp", 0.5, 40)
        restricted = _mk_result("flat", 0.5 * np.e, 40)
        assert compare_lrt(full, restricted) == pytest.approx(stats.chi2.sf(40.0, 4), rel=1e-10)

    def test_undesignated_pair_rejected(self):
        with pytest.raises(ValueError, match="nesting"):
            compare_lrt(_mk_result("pure_hill", 1, 30), _mk_result("flat", 1, 30))

    def test_mismatched_n_obs_rejected(self):
        with pytest.raises(ValueError, match="observations"):
            compare_lrt(_mk_result("hill_exp", 1, 30), _mk_result("flat", 1, 40))


class TestOosR2:
    def test_noiseless_generalizes(self, noiseless_curve):
        n, y = noiseless_curve
        assert oos_r2(n, y, "hill_exp") > 0.99

    def test_too_few_points(self):
        with pytest.raises(ValueError, match="holdout"):
            oos_r2([1, 2, 3, 4], [0.1, 0.2, 0.3, 0.4], "flat")

    @pytest.mark.slow
    def test_pure_noise_negative_in_expectation(self, fast_fit):
        # Monte-Carlo oracle: trendless noise must not generalize
        values = []
        n = np.arange(1, 31, dtype=float)
        for rep in range(200):
            rng = np.random.default_rng(1000 + rep)
            y = rng.uniform(0.3, 0.7) + rng.normal(0, 0.1, 30)
            values.append(oos_r2(n, y, "hill_exp", fast_fit))
        assert np.mean(values) <= 0.0

    def test_negative_values_are_legal(self, fast_fit):
        # a wiggly target can score worse than the held-out mean
        rng = np.random.default_rng(77)
        n = np.arange(1, 26, dtype=float)
        y = np.where(n % 2 == 0, 0.8, 0.2) + rng.normal(0, 0.02, 25)
        value = oos_r2(n, y, "monotonic_decay", fast_fit)
        assert np.isfinite(value)


class TestBootstrapFit:
    @pytest.mark.slow
    def test_zero_noise_ci_tight(self, noiseless_curve):
        # every resample of noiseless data still contains the exact curve,
        # so the peak CI collapses to optimizer-tolerance width
        n, y = noiseless_curve
        boot = bootstrap_fit(n, y, "hill_exp", FitConfig(), n_boot=100, seed=1)
        width = boot.ci_high[0] - boot.ci_low[0]
        assert width < 0.05
        assert boot.n_failed == 0

    def test_param_statistic_with_correlations(self, fast_fit):
        n, y = _noisy_curve([0.2, 0.3, 2, 8, 30], 50, seed=3)
        boot = bootstrap_fit(n, y, "hill_exp", fast_fit, n_boot=100, statistic="params", seed=2)
        names = MODELS["hill_exp"].param_names
        corr = boot.correlations[names.index("c0"), names.index("s")]
        assert corr < 0  # baseline trades off against decay speed

    def test_b_floor(self, noiseless_curve):
        n, y = noiseless_curve
        with pytest.raises(ValueError, match="n_boot"):
            bootstrap_fit(n, y, n_boot=50)

    def test_determinism(self, noiseless_curve, fast_fit):
        n, y = noiseless_curve
        a = bootstrap_fit(n, y, "hill_exp", fast_fit, n_boot=100, seed=9)
        b = bootstrap_fit(n, y, "hill_exp", fast_fit, n_boot=100, seed=9)
        assert np.array_equal(a.samples, b.samples)


class TestAscent:
    def _curve_with_rise(self, pre, post=None):
        means = np.array(pre + (post or []), dtype=float)
        return BinnedCurve(np.arange(1, len(means) + 1), means, np.full(len(means), 100))

    def test_increasing_prepeak_significant(self):
        rng = np.random.default_rng(0)
        pre = list(np.linspace(0.2, 0.6, 12) + rng.normal(0, 0.01, 12))
        curve = self._curve_with_rise(pre, [0.5, 0.4])
        res = ascent_significance(curve, n_star=12.5)
        assert res.p_value < 0.05 and not res.insufficient

    def test_flat_prepeak_near_half(self):
        # Monte-Carlo: under a flat segment the one-sided p is symmetric
        ps = []
        for rep in range(200):
            rng = np.random.default_rng(rep)
            pre = list(0.4 + rng.normal(0, 0.05, 10))
            curve = self._curve_with_rise(pre, [0.3])
            ps.append(ascent_significance(curve, n_star=10.5).p_value)
        assert abs(np.mean(ps) - 0.5) < 0.08

    def test_two_bins_guard(self):
        curve = self._curve_with_rise([0.2, 0.4], [0.3])
        res = ascent_significance(curve, n_star=2.5)
        assert res.p_value == 1.0 and res.insufficient


class TestPermutationFit:
    def test_strong_population_p_floor(self, fast_fit):
        series = scenario_population("strong_inverted_u", seed=4)[:150]
        res = permutation_fit_test(
            series, n_permutations=100, seed=0, config=fast_fit,
            null_config=FitConfig(n_starts=4, max_iter=300),
        )
        assert res.p_value <= 1 / 100
        assert res.observed_r2 > 0.5
        assert res.null_r2_mean < 0.3

    def test_b_floor(self):
        series = scenario_population("flat", seed=1)[:20]
        with pytest.raises(ValueError, match="n_permutations"):
            permutation_fit_test(series, n_permutations=50)

    def test_resolution_semantics(self, fast_fit):
        # B = 100 gives p in steps of 0.01
        series = generate_null_users("flat", 40, seed=3)
        res = permutation_fit_test(
            series, n_permutations=100, seed=1, config=FitConfig(n_starts=4, max_iter=200),
        )
        assert res.p_value == pytest.approx(round(res.p_value * 100) / 100, abs=1e-12)

    @pytest.mark.slow
    def test_null_p_spread(self):
        # exchangeable input: p should spread over (0, 1), not pile up
        light = FitConfig(n_starts=4, max_iter=200)
        ps = []
        for rep in range(20):
            series = generate_null_users("flat", 40, seed=500 + rep)
            res = permutation_fit_test(series, n_permutations=100, seed=rep, config=light)
            ps.append(res.p_value)
        assert 0.15 < np.mean(ps) < 0.85
        assert np.std(ps) > 0.1


@pytest.mark.slow
class TestLrtNullUniformity:
    def test_ks_band_under_monotonic_null(self):
        """LRT p-values on decay-generated noisy data are near-uniform.

        Boundary effects make the chi-square df approximate; the KS band is
        widened accordingly (statistic < 0.1 on 500 replicates).
        """
        config = FitConfig(n_starts=8, max_iter=400)
        n = np.arange(1, 41, dtype=float)
        ps = []
        for rep in range(500):
            rng = np.random.default_rng(20_000 + rep)
            theta = [rng.uniform(0.2, 0.5), rng.uniform(0.1, 0.3), rng.uniform(10, 50)]
            y = evaluate("monotonic_decay", theta, n) + rng.normal(0, 0.05, 40)
            full = fit_curve(n, y, "hill_exp", config)
            restricted = fit_curve(n, y, "monotonic_decay", config)
            ps.append(compare_lrt(full, restricted))
        ks = stats.kstest(ps, "uniform").statistic
        assert ks < 0.1, f"KS statistic {ks:.3f} outside widened uniformity band"
