import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from apictwin.simplex import NonFiniteObjectiveError, initial_simplex, nelder_mead


def test_quadratic_1d():
    r = nelder_mead(lambda x: (x[0] - 3.0) ** 2, [0.0], xtol=1e-10)
    assert abs(r.x[0] - 3.0) < 1e-6 and r.converged


def test_rosenbrock():
    r = nelder_mead(optimize.rosen, [-1.2, 1.0], xtol=1e-10, max_iter=20000, max_fev=40000)
    assert np.allclose(r.x, [1.0, 1.0], atol=1e-4)


def test_constant_returns_start_and_flags():
    r = nelder_mead(lambda x: 4.0, [0.3, -0.2])
    assert np.allclose(r.x, [0.3, -0.2]) and not r.improved
    assert "no improvement" in r.message


def test_non_finite_objective_aborts():
    with pytest.raises(NonFiniteObjectiveError):
        nelder_mead(lambda x: float("nan"), [1.0])


def test_explicit_simplex_shape_checked():
    with pytest.raises(ValueError):
        nelder_mead(lambda x: 0.0, simplex=np.zeros((2, 2)))


def test_budget_exhaustion_reported():
    r = nelder_mead(optimize.rosen, [-1.2, 1.0], max_iter=5)
    assert not r.converged and r.nit <= 5


def test_matches_scipy_reference_on_shifted_quadratic():
    c = np.array([1.5, -2.0, 0.25])
    f = lambda x: float(np.sum((x - c) ** 2 * [1, 10, 100]))
    mine = nelder_mead(f, np.zeros(3), xtol=1e-10, max_iter=10000, max_fev=20000)
    ref = optimize.minimize(f, np.zeros(3), method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 0})
    assert np.allclose(mine.x, ref.x, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=4), st.integers(1, 200))
def test_best_value_monotone_in_budget(c, budget):
    c = np.array(c)
    f = lambda x: float(np.sum((x - c) ** 2))
    small = nelder_mead(f, np.zeros(c.size), max_iter=budget)
    large = nelder_mead(f, np.zeros(c.size), max_iter=2 * budget)
    assert large.fun <= small.fun


def test_initial_simplex_default_steps():
    s = initial_simplex([0.0, 2.0])
    assert s.shape == (3, 2)
    assert s[1, 0] == pytest.approx(0.00025) and s[2, 1] == pytest.approx(2.1)
