import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from mdfm.models.schemas import Hyperparameters
from mdfm.services.penalty import (
    enforce_causality,
    enforce_transition_causality,
    gamma_matrix,
    penalty,
    soft_threshold,
)
from mdfm.services.state_space import spectral_radius


def test_gamma_matrix():
    assert_allclose(gamma_matrix(Hyperparameters(rho=2.0, alpha=0.5, beta=1.5), 2), np.diag([2.0, 3.0]))


def test_zero_rho_means_no_penalty():
    hp = Hyperparameters(rho=0.0, alpha=0.3, beta=1.2)
    assert penalty(np.array([0.5, 0.2, -0.1]), np.ones((2, 2)), hp, n_idio=1) == 0.0


def test_pure_lasso_single_loading():
    hp = Hyperparameters(rho=1.0, alpha=1.0, beta=1.0)
    assert penalty(np.zeros(1), np.array([[2.0]]), hp, n_idio=0) == pytest.approx(1.0)


def test_lag_weights_grow_geometrically():
    hp = Hyperparameters(rho=1.0, alpha=0.0, beta=2.0)
    # ridge only: 0.5 * (1 * 1 + 2 * 1) for a unit loading at lags 0 and 1
    assert penalty(np.zeros(2), np.ones((1, 2)), hp, n_idio=0) == pytest.approx(1.5)


@pytest.mark.parametrize(("x", "threshold", "expected"), [
    (3.0, 1.0, 2.0),
    (-0.5, 1.0, 0.0),
    (-3.0, 1.0, -2.0),
    (0.0, 0.0, 0.0),
])
def test_soft_threshold(x, threshold, expected):
    assert soft_threshold(x, threshold) == expected


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(0, 1e3))
def test_soft_threshold_is_proximal(x, threshold):
    # minimizer of 0.5 (z - x)^2 + threshold |z|
    z = soft_threshold(x, threshold)
    objective = lambda v: 0.5 * (v - x) ** 2 + threshold * abs(v)
    for step in (1e-3, -1e-3):
        assert objective(z) <= objective(z + step) + 1e-6
    assert abs(z) <= abs(x)


@pytest.mark.parametrize(("coefficient", "expected"), [(0.5, 0.5), (1.2, 0.98), (-1.5, -0.98)])
def test_enforce_causality_ar1(coefficient, expected):
    assert enforce_causality([coefficient])[0] == expected


def test_enforce_causality_ar4():
    raw = np.array([0.6, 0.3, 0.2, 0.1])
    scaled = raw * (1.05 / spectral_radius(raw)) ** np.arange(1, 5)
    assert spectral_radius(scaled) == pytest.approx(1.05)
    fixed = enforce_causality(scaled)
    assert spectral_radius(fixed) <= 0.98 * (1 + 1e-6)
    assert_allclose(enforce_causality(fixed), fixed)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=5))
def test_enforce_causality_idempotent(coefficients):
    once = enforce_causality(coefficients)
    assert spectral_radius(once) <= 0.98 * (1 + 1e-4)
    assert_allclose(enforce_causality(once), once, rtol=1e-4, atol=1e-12)


def test_transition_causality_counts_blocks():
    pi = np.array([0.5, 1.1, 1.5, 0.0])
    fixed, rescaled = enforce_transition_causality(pi, n_idio=2)
    assert rescaled == 2
    assert_allclose(fixed[:2], [0.5, 0.98])
    assert spectral_radius(fixed[2:]) <= 0.98 * (1 + 1e-6)
