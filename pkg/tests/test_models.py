"""Curve-family evaluation, peak location, and decline geometry."""

import numpy as np
import pytest

from peakshift.models import (
    MODELS,
    HillExpParams,
    decline_fraction,
    evaluate,
    peak_location,
)

THETA = [0.2, 0.3, 2.0, 8.0, 30.0]


class TestEvaluate:
    def test_hill_exp_at_zero_is_baseline(self):
        assert evaluate("hill_exp", THETA, 0.0) == pytest.approx(0.2)

    def test_hill_exp_decays_to_baseline(self):
        c0, A, a, b, s = THETA
        n_large = 10 * s * max(1.0, b)
        assert abs(evaluate("hill_exp", THETA, n_large) - c0) < 1e-3

    def test_hill_exp_direct_formula(self):
        # oracle: direct evaluation of the closed form at the half-max point
        expected = 0.2 + 0.3 * 0.5 * np.exp(-8.0 / 30.0)
        assert evaluate("hill_exp", THETA, 8.0) == pytest.approx(expected, abs=1e-12)

    def test_negative_exposure_rejected(self):
        with pytest.raises(ValueError, match=">= 0"):
            evaluate("hill_exp", THETA, -1.0)

    def test_wrong_param_count_rejected(self):
        with pytest.raises(ValueError, match="parameters"):
            evaluate("flat", [0.1, 0.2], 1.0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown model"):
            evaluate("cubic", [1.0], 1.0)

    def test_vectorized_matches_scalar(self):
        ns = np.array([0.5, 3.0, 17.0])
        vec = evaluate("gaussian_peak", [0.1, 0.5, 10.0, 4.0], ns)
        for i, n in enumerate(ns):
            assert vec[i] == evaluate("gaussian_peak", [0.1, 0.5, 10.0, 4.0], float(n))

    def test_continuity_all_families(self):
        # finite-difference continuity on random valid parameter draws
        rng = np.random.default_rng(3)
        for kind, spec in MODELS.items():
            for _ in range(20):
                params = [rng.uniform(lo, hi) for lo, hi in spec.default_bounds]
                n = rng.uniform(0.5, 80.0)
                delta = evaluate(kind, params, n + 1e-7) - evaluate(kind, params, n)
                assert abs(delta) < 1e-3, f"{kind} jumps at n={n}"


class TestHillExpParams:
    def test_valid_roundtrip(self):
        p = HillExpParams(*THETA)
        assert np.allclose(p.as_array(), THETA)

    @pytest.mark.parametrize(
        "theta",
        [
            (-0.1, 0.3, 2, 8, 30),
            (0.2, 1.4, 2, 8, 30),
            (0.2, 0.3, 0.0, 8, 30),
            (0.2, 0.3, 2, -8, 30),
            (0.2, 0.3, 2, 8, 0.0),
        ],
    )
    def test_out_of_bounds_rejected(self, theta):
        with pytest.raises(ValueError):
            HillExpParams(*theta)


class TestPeakLocation:
    def test_flat_has_no_peak(self):
        peak = peak_location("flat", [0.4], (1, 100))
        assert peak.n_star is None and not peak.interior

    def test_monotonic_decay_boundary(self):
        peak = peak_location("monotonic_decay", [0.2, 0.3, 20.0], (1, 100))
        assert peak.n_star == pytest.approx(1.0)
        assert not peak.interior

    def test_pure_hill_peaks_at_right_edge(self):
        peak = peak_location("pure_hill", [0.2, 0.3, 2.0, 8.0], (1, 100))
        assert peak.n_star == pytest.approx(100.0)
        assert not peak.interior

    def test_hill_exp_matches_dense_grid(self):
        grid = np.arange(1, 100.0005, 0.001)
        dense = grid[np.argmax(evaluate("hill_exp", THETA, grid))]
        peak = peak_location("hill_exp", THETA, (1, 100))
        assert peak.interior
        assert abs(peak.n_star - dense) < 0.01

    def test_randomized_agreement_with_dense_grid(self):
        # property: grid + golden refinement tracks a brute-force argmax
        rng = np.random.default_rng(11)
        checked = 0
        while checked < 60:
            c0 = rng.uniform(0, 0.5)
            A = rng.uniform(0.1, 0.5)
            a = rng.uniform(0.5, 4)
            s = rng.uniform(10, 80)
            b = rng.uniform(1, 30)
            theta = [c0, A, a, b, s]
            grid = np.arange(1, 120.0005, 0.001)
            vals = evaluate("hill_exp", theta, grid)
            dense = grid[np.argmax(vals)]
            if dense <= 1.5 or dense >= 119:
                continue  # boundary peaks compare trivially
            peak = peak_location("hill_exp", theta, (1, 120))
            assert abs(peak.n_star - dense) <= 0.25 + 1e-6
            checked += 1

    def test_peak_value_dominates_grid(self):
        peak = peak_location("gaussian_peak", [0.1, 0.4, 30.0, 5.0], (1, 100))
        grid = np.arange(1, 100.25, 0.25)
        assert peak.value >= evaluate("gaussian_peak", [0.1, 0.4, 30.0, 5.0], grid).max() - 1e-9

    def test_degenerate_domain_rejected(self):
        with pytest.raises(ValueError, match="domain"):
            peak_location("hill_exp", THETA, (5, 5))

    def test_hill_exp_b_to_zero_nests_monotonic_decay(self):
        # with a >= 1 and b -> 0 the rise saturates instantly, leaving pure decay
        n = np.linspace(1, 100, 500)
        hill = evaluate("hill_exp", [0.2, 0.3, 1.5, 1e-6, 30.0], n)
        mono = evaluate("monotonic_decay", [0.2, 0.3, 30.0], n)
        assert np.max(np.abs(hill - mono)) < 1e-4


class TestDeclineFraction:
    def test_flat_declines_zero(self):
        assert decline_fraction("flat", [0.4], 5.0, 50.0) == 0.0

    def test_huge_s_no_decline(self):
        theta = [0.2, 0.3, 2.0, 8.0, 1e6]
        peak = peak_location("hill_exp", theta, (1, 200))
        n_star = peak.n_star if peak.n_star is not None else 100.0
        assert decline_fraction("hill_exp", theta, n_star, n_star + 100) < 0.01

    def test_direct_evaluation_oracle(self):
        peak = peak_location("hill_exp", THETA, (1, 100))
        d = decline_fraction("hill_exp", THETA, peak.n_star, 100.0)
        c_peak = evaluate("hill_exp", THETA, peak.n_star)
        c_end = evaluate("hill_exp", THETA, 100.0)
        assert d == pytest.approx((c_peak - c_end) / (c_peak - 0.2), abs=1e-12)

    def test_monotone_in_s(self):
        # slower decay (larger s) never increases the decline fraction
        rng = np.random.default_rng(5)
        for _ in range(20):
            c0, A, a, b = rng.uniform(0.1, 0.4), rng.uniform(0.2, 0.6), rng.uniform(1, 3), rng.uniform(3, 15)
            declines = []
            for s in (20.0, 40.0, 80.0, 160.0):
                theta = [c0, A, a, b, s]
                peak = peak_location("hill_exp", theta, (1, 200))
                declines.append(decline_fraction("hill_exp", theta, peak.n_star, 200.0))
            assert all(d1 >= d2 - 1e-9 for d1, d2 in zip(declines, declines[1:]))

    def test_requires_n_end_after_peak(self):
        with pytest.raises(ValueError, match="exceed"):
            decline_fraction("hill_exp", THETA, 10.0, 5.0)
