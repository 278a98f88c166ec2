"""Aggregation-distortion diagnostics.

The distortion factor D is the ratio of the aggregate-curve peak to the
median individual peak; |D - 1| far from zero means the population curve
misrepresents the typical user.  The selection identity makes the mechanism
exact: at any exposure, the mean peak among still-active users exceeds the
population mean peak by Cov(peak, survival) / P(survival).  The pooled
estimator combines that per-dataset selection strength into one one-sided
test across datasets, and the within-user permutation test asks whether
group-level median peaks are more consistent than chance allows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

__all__ = [
    "DistortionReport",
    "distortion_factor",
    "SelectionIdentity",
    "selection_identity_check",
    "nonparametric_distortion_check",
    "SelectionSummary",
    "PooledResult",
    "pooled_distortion",
    "RangePermutationResult",
    "within_user_permutation",
]


@dataclass
class DistortionReport:
    group: str
    aggregate_peak: float
    median: float
    iqr: tuple[float, float]
    skewness: float
    count: int
    distortion: float
    median_ci: tuple[float, float]
    stability_fraction: float | None
    reference_window: tuple[float, float] | None

    def to_dict(self) -> dict:
        return {
            "group": self.group,
            "aggregate_peak": self.aggregate_peak,
            "individual_median": self.median,
            "individual_iqr": list(self.iqr),
            "individual_skewness": self.skewness,
            "n_peaks": self.count,
            "distortion": self.distortion,
            "median_ci": list(self.median_ci),
            "stability_fraction": self.stability_fraction,
            "reference_window": list(self.reference_window) if self.reference_window else None,
        }


def distortion_factor(
    aggregate_peak: float,
    individual_peaks,
    n_boot: int = 1000,
    subsample_size: int | None = None,
    seed: int = 0,
    reference_window: tuple[float, float] | None = None,
    group: str = "all",
) -> DistortionReport:
    """Distortion factor with bootstrap uncertainty for the individual median.

    The median CI is a percentile bootstrap (resampling peaks with
    replacement); the stability fraction is the share of ``n_boot``
    subsamples (without replacement, size ``subsample_size``) whose median
    lands inside ``reference_window``, when a window is supplied.
    """
    peaks = np.asarray(individual_peaks, dtype=float)
    if len(peaks) < 5:
        raise ValueError("need at least 5 individual peaks")
    if not aggregate_peak > 0:
        raise ValueError("aggregate peak must be positive")
    median = float(np.median(peaks))
    if median <= 0:
        raise ValueError("median individual peak must be positive")

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    boot_medians = np.median(
        peaks[rng.integers(0, len(peaks), (n_boot, len(peaks)))], axis=1
    )
    ci = np.percentile(boot_medians, [2.5, 97.5])

    stability = None
    if reference_window is not None:
        size = min(subsample_size or 100, len(peaks))
        sub_medians = np.array(
            [np.median(rng.choice(peaks, size=size, replace=False)) for _ in range(n_boot)]
        )
        lo, hi = reference_window
        stability = float(np.mean((sub_medians >= lo) & (sub_medians <= hi)))

    q1, q3 = np.percentile(peaks, [25, 75])
    return DistortionReport(
        group=group,
        aggregate_peak=float(aggregate_peak),
        median=median,
        iqr=(float(q1), float(q3)),
        skewness=float(stats.skew(peaks, bias=False)) if len(peaks) > 2 else 0.0,
        count=len(peaks),
        distortion=float(aggregate_peak / median),
        median_ci=(float(ci[0]), float(ci[1])),
        stability_fraction=stability,
        reference_window=reference_window,
    )


@dataclass(frozen=True)
class SelectionIdentity:
    lhs: float
    rhs: float
    abs_diff: float
    fosd: bool | None = None

    def to_dict(self) -> dict:
        out = {"lhs": self.lhs, "rhs": self.rhs, "abs_diff": self.abs_diff}
        if self.fosd is not None:
            out["fosd"] = self.fosd
        return out


def _identity_terms(peaks, survived) -> tuple[np.ndarray, np.ndarray, float, float]:
    peaks = np.asarray(peaks, dtype=float)
    s = np.asarray(survived, dtype=float)
    if peaks.shape != s.shape or peaks.ndim != 1:
        raise ValueError("peaks and survival indicators must be equal-length 1-D")
    if not np.all((s == 0) | (s == 1)):
        raise ValueError("survival indicators must be 0/1")
    if s.sum() == 0:
        raise ValueError("no survivors")
    lhs = float(np.sum(peaks * s) / s.sum() - peaks.mean())
    # population (divide-by-n) covariance
    cov = float(np.mean(peaks * s) - peaks.mean() * s.mean())
    rhs = cov / float(s.mean())
    return peaks, s, lhs, rhs


def selection_identity_check(peaks, survived) -> SelectionIdentity:
    """Verify E[peak | survived] - E[peak] = Cov(peak, survival) / P(survival).

    Both sides are computed independently from the population; the identity
    is exact, so abs_diff is pure floating-point round-off.
    """
    _, _, lhs, rhs = _identity_terms(peaks, survived)
    return SelectionIdentity(lhs=lhs, rhs=rhs, abs_diff=abs(lhs - rhs))


def nonparametric_distortion_check(peaks, survived) -> SelectionIdentity:
    """Selection identity plus a stochastic-dominance check on the peaks.

    The FOSD flag is set when the survivor-conditional empirical CDF of
    peaks sits at or below the unconditional CDF everywhere; dominance
    forces the selection shift to be non-negative, which is asserted.
    """
    peaks, s, lhs, rhs = _identity_terms(peaks, survived)
    support = np.unique(peaks)
    survivors = peaks[s == 1]
    cdf_all = np.searchsorted(np.sort(peaks), support, side="right") / len(peaks)
    cdf_surv = np.searchsorted(np.sort(survivors), support, side="right") / len(survivors)
    fosd = bool(np.all(cdf_surv <= cdf_all + 1e-12))
    if fosd:
        assert lhs >= -1e-9, "FOSD held but the selection shift is negative"
    return SelectionIdentity(lhs=lhs, rhs=rhs, abs_diff=abs(lhs - rhs), fosd=fosd)


@dataclass(frozen=True)
class SelectionSummary:
    """Per-dataset ingredients of the pooled selection test.

    ``rho`` is the correlation between individual peaks and survival at a
    reference exposure, ``sigma`` the (population) SD of peaks, ``s_bar``
    the survival rate there, ``n`` the user count.
    """

    rho: float
    sigma: float
    s_bar: float
    n: int
    label: str = ""

    def __post_init__(self) -> None:
        if not -1.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must be in [-1, 1], got {self.rho}")
        if not 0.0 < self.s_bar <= 1.0:
            raise ValueError(f"s_bar must be in (0, 1], got {self.s_bar}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.n < 1:
            raise ValueError("n must be >= 1")

    @classmethod
    def from_population(
        cls, peaks, n_max, n_ref: float | None = None, label: str = ""
    ) -> "SelectionSummary":
        """Summarize a population of (peak, last observed exposure) pairs.

        The reference exposure defaults to the population median of the last
        observed exposures, the regime where attrition starts to bind.
        """
        peaks = np.asarray(peaks, dtype=float)
        n_max = np.asarray(n_max, dtype=float)
        if n_ref is None:
            n_ref = float(np.median(n_max))
        survived = (n_max >= n_ref).astype(float)
        if survived.sum() == 0:
            raise ValueError("no survivors at the reference exposure")
        sigma = float(peaks.std())
        if sigma > 0 and survived.std() > 0:
            rho = float(np.corrcoef(peaks, survived)[0, 1])
        else:
            rho = 0.0
        return cls(rho=rho, sigma=sigma, s_bar=float(survived.mean()), n=len(peaks), label=label)

    def to_dict(self) -> dict:
        return {
            "rho": self.rho,
            "sigma": self.sigma,
            "s_bar": self.s_bar,
            "n": self.n,
            "label": self.label,
        }


@dataclass(frozen=True)
class PooledResult:
    delta_hat: float
    variance_bound: float
    z: float
    p_one_sided: float
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "delta_hat": self.delta_hat,
            "variance_bound": self.variance_bound,
            "z": self.z,
            "p_one_sided": self.p_one_sided,
            "note": self.note,
        }


def pooled_distortion(summaries: Sequence[SelectionSummary]) -> PooledResult:
    """Sample-weighted pooled selection shift across datasets, one-sided test.

    delta_hat = sum (n_d / N) rho_d sigma_d sqrt((1 - s_bar_d) / s_bar_d);
    its variance is bounded by max_d [(rho_d sigma_d)^2 (1 - s_bar_d) /
    s_bar_d] / N, so z = delta_hat / sqrt(bound) gives a conservative test.
    With no censoring anywhere every term vanishes and the test sits at the
    p = 0.5 boundary.
    """
    if not summaries:
        raise ValueError("need at least one dataset summary")
    n_total = sum(s.n for s in summaries)
    terms = []
    scales = []
    for s in summaries:
        odds = (1.0 - s.s_bar) / s.s_bar
        terms.append((s.n / n_total) * s.rho * s.sigma * np.sqrt(odds))
        scales.append((s.rho * s.sigma) ** 2 * odds)
    delta_hat = float(np.sum(terms))
    variance_bound = float(max(scales) / n_total)

    if all(s.s_bar == 1.0 for s in summaries):
        return PooledResult(0.0, 0.0, 0.0, 0.5, note="no censoring in any dataset")
    if variance_bound <= 0:
        return PooledResult(delta_hat, 0.0, 0.0, 0.5, note="degenerate variance bound")
    z = delta_hat / np.sqrt(variance_bound)
    return PooledResult(delta_hat, variance_bound, float(z), float(stats.norm.sf(z)))


@dataclass(frozen=True)
class RangePermutationResult:
    r_obs: float
    p_value: float
    n_groups: int
    n_multi_users: int
    n_permutations: int
    degenerate: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "r_obs": self.r_obs,
            "p_value": self.p_value,
            "n_groups": self.n_groups,
            "n_multi_users": self.n_multi_users,
            "n_permutations": self.n_permutations,
            "degenerate": self.degenerate,
            "note": self.note,
        }


def within_user_permutation(
    peaks: Mapping[str, Mapping[str, float]],
    n_permutations: int = 10_000,
    seed: int = 0,
) -> RangePermutationResult:
    """Cross-group consistency test that respects within-user dependence.

    The statistic is the range (max - min) of group-level median peaks.
    Under the null that a user's fitted peak is exchangeable across their
    groups, shuffling each multi-group user's values among their own groups
    leaves the joint law unchanged; the p-value is the fraction of
    permutations whose range is at most the observed one (small p = observed
    medians unusually consistent).  Single-group users are fixed points, so
    the test is conservative; with no multi-group users it degenerates to
    p = 1.
    """
    users = sorted(peaks)
    group_names = sorted({g for u in users for g in peaks[u]})
    if len(group_names) < 2:
        raise ValueError("need at least two groups")

    entries = [(u, sorted(peaks[u])) for u in users]
    multi = [(u, gs) for u, gs in entries if len(gs) > 1]

    def median_range(assignment: Mapping[str, list[float]]) -> float:
        medians = [np.median(vals) for vals in assignment.values() if vals]
        return float(np.max(medians) - np.min(medians))

    def collect(permute_rng=None) -> dict[str, list[float]]:
        groups: dict[str, list[float]] = {g: [] for g in group_names}
        for u, gs in entries:
            values = [peaks[u][g] for g in gs]
            if permute_rng is not None and len(gs) > 1:
                values = list(permute_rng.permutation(values))
            for g, v in zip(gs, values):
                groups[g].append(v)
        return groups

    r_obs = median_range(collect())
    if not multi:
        return RangePermutationResult(
            r_obs=r_obs,
            p_value=1.0,
            n_groups=len(group_names),
            n_multi_users=0,
            n_permutations=n_permutations,
            degenerate=True,
            note="no exchangeable structure: all users single-group",
        )

    hits = 0
    for b in range(n_permutations):
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        if median_range(collect(rng)) <= r_obs:
            hits += 1
    return RangePermutationResult(
        r_obs=r_obs,
        p_value=hits / n_permutations,
        n_groups=len(group_names),
        n_multi_users=len(multi),
        n_permutations=n_permutations,
    )
