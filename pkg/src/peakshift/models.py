"""Parametric engagement-curve families.

Seven candidate shapes for engagement as a function of exposure count ``n``.
The centerpiece is the Hill-exponential curve

    C(n) = c0 + A * n^a / (n^a + b^a) * exp(-n / s)

which rises with initial exposure (Hill saturation term) and decays with
overexposure (exponential term), producing an inverted U.  The competing
families cover the alternative shapes a selection pipeline must rule out:
pure decay, flat, saturating rise, and three generic peaked forms.

All evaluation functions are vectorized over ``n`` and pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "MODELS",
    "ModelSpec",
    "HillExpParams",
    "PeakLocation",
    "evaluate",
    "peak_location",
    "decline_fraction",
]


@dataclass(frozen=True)
class HillExpParams:
    """Parameter vector for the Hill-exponential curve.

    Bounds are enforced at construction: ``c0`` and ``A`` in [0, 1],
    ``a``, ``b``, ``s`` strictly positive.
    """

    c0: float
    A: float
    a: float
    b: float
    s: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.c0 <= 1.0:
            raise ValueError(f"c0 must be in [0, 1], got {self.c0}")
        if not 0.0 <= self.A <= 1.0:
            raise ValueError(f"A must be in [0, 1], got {self.A}")
        for name in ("a", "b", "s"):
            value = getattr(self, name)
            if not value > 0.0:
                raise ValueError(f"{name} must be > 0, got {value}")

    def as_array(self) -> np.ndarray:
        return np.array([self.c0, self.A, self.a, self.b, self.s], dtype=float)


def _hill_exponential(n: np.ndarray, p: Sequence[float]) -> np.ndarray:
    c0, amp, a, b, s = p
    hill = n**a / (n**a + b**a)
    return c0 + amp * hill * np.exp(-n / s)


def _monotonic_decay(n: np.ndarray, p: Sequence[float]) -> np.ndarray:
    c0, amp, s = p
    return c0 + amp * np.exp(-n / s)


def _flat(n: np.ndarray, p: Sequence[float]) -> np.ndarray:
    return np.full_like(n, p[0], dtype=float)


def _pure_hill(n: np.ndarray, p: Sequence[float]) -> np.ndarray:
    c0, amp, a, b = p
    return c0 + amp * n**a / (n**a + b**a)


def _gaussian_peak(n: np.ndarray, p: Sequence[float]) -> np.ndarray:
    c0, amp, mu, sigma = p
    return c0 + amp * np.exp(-((n - mu) ** 2) / (2.0 * sigma**2))


def _log_peak(n: np.ndarray, p: Sequence[float]) -> np.ndarray:
    c0, amp, s = p
    return c0 + amp * np.log1p(n) * np.exp(-n / s)


def _quadratic(n: np.ndarray, p: Sequence[float]) -> np.ndarray:
    alpha, beta, gamma = p
    return alpha + beta * n + gamma * n**2


@dataclass(frozen=True)
class ModelSpec:
    """Static description of one curve family."""

    name: str
    param_names: tuple[str, ...]
    fn: Callable[[np.ndarray, Sequence[float]], np.ndarray]
    # default box constraints per parameter, used by the fit engine
    default_bounds: tuple[tuple[float, float], ...]
    # parameters explored on a log scale when seeding multi-start fits
    log_scale: tuple[bool, ...]
    # True when param 0 is a baseline level the curve returns to
    has_baseline: bool
    # "none" = no peak, "boundary" = monotone (peak pinned at domain edge)
    peak_kind: str = "free"

    @property
    def k(self) -> int:
        return len(self.param_names)


MODELS: dict[str, ModelSpec] = {
    spec.name: spec
    for spec in (
        ModelSpec(
            "hill_exp",
            ("c0", "A", "a", "b", "s"),
            _hill_exponential,
            ((0.0, 1.0), (0.0, 1.0), (0.1, 10.0), (0.1, 200.0), (1.0, 1000.0)),
            (False, False, True, True, True),
            has_baseline=True,
        ),
        ModelSpec(
            "monotonic_decay",
            ("c0", "A", "s"),
            _monotonic_decay,
            ((0.0, 1.0), (0.0, 1.0), (1.0, 1000.0)),
            (False, False, True),
            has_baseline=True,
            peak_kind="boundary",
        ),
        ModelSpec(
            "flat",
            ("c0",),
            _flat,
            ((0.0, 1.0),),
            (False,),
            has_baseline=True,
            peak_kind="none",
        ),
        ModelSpec(
            "pure_hill",
            ("c0", "A", "a", "b"),
            _pure_hill,
            ((0.0, 1.0), (0.0, 1.0), (0.1, 10.0), (0.1, 200.0)),
            (False, False, True, True),
            has_baseline=True,
            peak_kind="boundary",
        ),
        ModelSpec(
            "gaussian_peak",
            ("c0", "A", "mu", "sigma"),
            _gaussian_peak,
            ((0.0, 1.0), (0.0, 1.0), (0.1, 200.0), (0.5, 100.0)),
            (False, False, False, True),
            has_baseline=True,
        ),
        ModelSpec(
            "log_peak",
            ("c0", "A", "s"),
            _log_peak,
            ((0.0, 1.0), (0.0, 1.0), (1.0, 1000.0)),
            (False, False, True),
            has_baseline=True,
        ),
        ModelSpec(
            "quadratic",
            ("alpha", "beta", "gamma"),
            _quadratic,
            ((-2.0, 2.0), (-1.0, 1.0), (-0.5, 0.5)),
            (False, False, False),
            has_baseline=False,
        ),
    )
}


def _check_kind(kind: str) -> ModelSpec:
    try:
        return MODELS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {sorted(MODELS)}") from None


def evaluate(kind: str, params: Sequence[float], n) -> np.ndarray:
    """Evaluate curve family ``kind`` at exposure counts ``n`` (scalar or array).

    Raises ``ValueError`` for negative exposures or a parameter vector of the
    wrong length.
    """
    spec = _check_kind(kind)
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.k,):
        raise ValueError(f"{kind} expects {spec.k} parameters, got {params.shape}")
    arr = np.asarray(n, dtype=float)
    if np.any(arr < 0):
        raise ValueError("exposure counts must be >= 0")
    out = spec.fn(arr, params)
    return out if arr.ndim else float(out)


@dataclass(frozen=True)
class PeakLocation:
    """Location of the curve maximum on an evaluation domain.

    ``n_star`` is None for shapes with no peak (flat).  ``interior`` is False
    when the argmax sits on the domain edge, which downstream gates treat as
    "no genuine peak".
    """

    n_star: float | None
    interior: bool
    value: float | None

    def to_dict(self) -> dict:
        return {"n_star": self.n_star, "interior": self.interior, "value": self.value}


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(f: Callable[[float], float], lo: float, hi: float, tol: float) -> float:
    """Golden-section maximum of ``f`` on [lo, hi]; ties resolve left."""
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def peak_location(
    kind: str,
    params: Sequence[float],
    domain: tuple[float, float],
    grid_step: float = 0.25,
    refine_tol: float = 1e-3,
) -> PeakLocation:
    """Locate the curve maximum on ``domain`` = (n_min, n_max).

    Grid argmax (ties toward smaller n) refined by golden-section search in
    the bracketing interval.  Flat curves report no peak; monotone families
    report the boundary argmax flagged non-interior.
    """
    spec = _check_kind(kind)
    n_min, n_max = domain
    if not (0 <= n_min < n_max):
        raise ValueError(f"degenerate domain {domain}")

    if spec.peak_kind == "none":
        return PeakLocation(None, False, float(evaluate(kind, params, n_min)))

    grid = np.arange(n_min, n_max + grid_step / 2, grid_step)
    if grid[-1] < n_max:
        grid = np.append(grid, n_max)
    values = evaluate(kind, params, grid)
    idx = int(np.argmax(values))

    if idx == 0 or idx == len(grid) - 1:
        edge = grid[idx]
        return PeakLocation(float(edge), False, float(values[idx]))

    lo, hi = grid[idx - 1], grid[idx + 1]
    f = lambda x: float(evaluate(kind, params, x))  # noqa: E731
    refined = _golden_max(f, float(lo), float(hi), refine_tol)
    # keep the grid argmax if refinement failed to improve (non-unimodal bracket)
    if f(refined) < values[idx]:
        refined = float(grid[idx])
    interior = n_min + refine_tol < refined < n_max - refine_tol
    return PeakLocation(float(refined), bool(interior), f(refined))


def decline_fraction(kind: str, params: Sequence[float], n_star: float, n_end: float) -> float:
    """Post-peak decline as a fraction of the modulation height above baseline.

    Returns (C(n*) - C(n_end)) / (C(n*) - baseline), clamped to [0, 1], with
    baseline = the family's level parameter when it has one, else 0.  The
    relative form makes a "decline > 10%" gate scale-free across users with
    different baseline engagement.
    """
    spec = _check_kind(kind)
    if not n_end > n_star:
        raise ValueError(f"n_end ({n_end}) must exceed n_star ({n_star})")
    peak_val = float(evaluate(kind, params, n_star))
    end_val = float(evaluate(kind, params, n_end))
    baseline = float(params[0]) if spec.has_baseline else 0.0
    height = peak_val - baseline
    if height <= 0:
        return 0.0
    return float(np.clip((peak_val - end_val) / height, 0.0, 1.0))
