import numpy as np
import pytest

from peakshift import FitConfig, evaluate

# canonical inverted-U parameter vector used across modules
THETA0 = (0.2, 0.3, 2.0, 8.0, 30.0)


@pytest.fixture(scope="session")
def theta0():
    return THETA0


@pytest.fixture(scope="session")
def noiseless_curve():
    """Exact curve values on n = 1..60 for the canonical parameters."""
    n = np.arange(1, 61, dtype=float)
    return n, evaluate("hill_exp", THETA0, n)


@pytest.fixture(scope="session")
def fast_fit():
    """Smaller multi-start budget for tests where speed matters more than
    squeezing the last digit out of the optimizer."""
    return FitConfig(n_starts=8, max_iter=400)
