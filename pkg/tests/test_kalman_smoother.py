import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose
from scipy import stats

from mdfm.models.errors import DimensionError, NumericalError
from mdfm.services.kalman_smoother import KalmanSmoother
from mdfm.services.panel_builder import PanelBuilder
from mdfm.services.state_space import generic_state_space

from conftest import gaussian_conditioning, random_system


def scalar_system(epsilon=1.0):
    return generic_state_space([[0.0]], [[1.0]], [1.0], [[1.0]], [0.0], [[1.0]], epsilon)


def test_conjugate_scalar_update(smoother):
    ss = scalar_system()
    panel = PanelBuilder().from_matrix([[1.0]])
    # C = 0 with unit innovation: predicted N(0, 1), observed with unit noise
    fo = smoother.filter(ss, panel)
    assert fo.filtered_means[1, 0] == pytest.approx(0.5)
    assert fo.filtered_covs[1, 0, 0] == pytest.approx(0.5)
    assert fo.loglik == pytest.approx(-0.5 * np.log(4 * np.pi) - 0.25)
    assert fo.loglik == pytest.approx(stats.norm.logpdf(1.0, scale=np.sqrt(2.0)))


def test_prediction_only_without_observations(smoother):
    C = np.array([[0.9, 0.1], [0.0, 0.5]])
    ss = generic_state_space(C, np.eye(2), [1.0, 1.0], np.eye(2), [1.0, -2.0], np.eye(2), 0.5)
    panel = PanelBuilder().from_matrix(np.full((2, 4), np.nan))
    smo = smoother.smooth(ss, panel)
    expected = np.array([np.linalg.matrix_power(C, t) @ [1.0, -2.0] for t in range(5)])
    assert_allclose(smo.means, expected, atol=1e-12)
    assert smo.loglik == 0.0
    assert smoother.quasi_loglik(ss, panel) == 0.0


def test_single_period_smoothed_equals_filtered(smoother):
    ss, _ = random_system(3)
    panel = PanelBuilder().from_matrix(np.ones((ss.B.shape[0], 1)))
    fo = smoother.filter(ss, panel)
    smo = smoother.smooth(ss, panel)
    assert_allclose(smo.means[1], fo.filtered_means[1])
    assert_allclose(smo.covs[1], fo.filtered_covs[1])


def test_tiny_noise_tracks_observations(smoother):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(3, 5))
    ss = generic_state_space(0.5 * np.eye(3), np.eye(3), np.ones(3), np.eye(3), np.zeros(3), np.eye(3), 1e-8)
    smo = smoother.smooth(ss, PanelBuilder().from_matrix(values))
    assert_allclose(smo.means[1:].T, values, atol=1e-4)


@settings(max_examples=200, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_matches_gaussian_conditioning(seed):
    ss, panel = random_system(seed)
    smo = KalmanSmoother().smooth(ss, panel)
    means, covs, lag_one = gaussian_conditioning(ss, panel)
    assert_allclose(smo.means, means, atol=1e-8)
    assert_allclose(smo.covs, covs, atol=1e-8)
    assert_allclose(smo.lag_one[1:], lag_one[1:], atol=1e-8)
    for t in range(panel.T + 1):
        assert_allclose(smo.covs[t], smo.covs[t].T)
        assert np.linalg.eigvalsh(smo.covs[t]).min() > -1e-10


def test_loglik_matches_joint_density(smoother):
    ss, panel = random_system(17)
    T = panel.T
    B = ss.B
    # marginal of observed entries: stack H over all states
    H_rows, ys, means = [], [], []
    state_mean = ss.mu0
    states_cov = {}
    Phi_cov = ss.omega0
    for t in range(1, T + 1):
        state_mean = ss.C @ state_mean
        Phi_cov = ss.C @ Phi_cov @ ss.C.T + ss.Q
        states_cov[t] = Phi_cov
        for i in np.flatnonzero(panel.mask[:, t - 1]):
            H_rows.append((t, B[i]))
            ys.append(panel.values[i, t - 1])
            means.append(B[i] @ state_mean)
    if not ys:
        assert smoother.quasi_loglik(ss, panel) == 0.0
        return
    n = len(ys)
    cov = np.zeros((n, n))
    for a, (ta, ba) in enumerate(H_rows):
        for b, (tb, bb) in enumerate(H_rows):
            lo, hi = min(ta, tb), max(ta, tb)
            block = np.linalg.matrix_power(ss.C, hi - lo) @ states_cov[lo]
            cross_cov = block if ta >= tb else block.T
            cov[a, b] = ba @ cross_cov @ bb
    cov += ss.epsilon * np.eye(n)
    expected = stats.multivariate_normal(mean=means, cov=cov).logpdf(ys)
    assert smoother.quasi_loglik(ss, panel) == pytest.approx(expected, abs=1e-9)


def test_appended_empty_periods_leave_history_unchanged(smoother):
    ss, panel = random_system(5)
    smo = smoother.smooth(ss, panel)
    extended = smoother.smooth(ss, panel.with_periods(panel.T + 2))
    assert_allclose(extended.means[:panel.T + 1], smo.means, atol=1e-12)
    assert_allclose(extended.covs[:panel.T + 1], smo.covs, atol=1e-12)
    assert_allclose(extended.means[panel.T + 1], ss.C @ smo.means[panel.T], atol=1e-12)


def test_unobserved_period_matches_oracle(smoother):
    ss, panel = random_system(23)
    if panel.T < 2:
        panel = panel.with_periods(3)
    hollow = panel.without_time(2)
    smo = smoother.smooth(ss, hollow)
    means, covs, _ = gaussian_conditioning(ss, hollow)
    assert_allclose(smo.means, means, atol=1e-10)
    assert_allclose(smo.covs, covs, atol=1e-10)


def test_singular_innovation_covariance(smoother):
    # two identical rows without measurement noise
    ss = generic_state_space([[0.0]], [[1.0]], [1.0], [[1.0], [1.0]], [0.0], [[1.0]], 0.0)
    panel = PanelBuilder().from_matrix([[1.0], [1.0]])
    with pytest.raises(NumericalError) as info:
        smoother.filter(ss, panel)
    assert info.value.time == 1


def test_row_count_mismatch(smoother):
    ss = scalar_system()
    with pytest.raises(DimensionError):
        smoother.filter(ss, PanelBuilder().from_matrix(np.ones((2, 3))))
