import numpy as np
import pytest
from scipy import linalg

from mdfm.models.schemas import Hyperparameters, ModelConfig, SimulationDesign
from mdfm.services.ecm_estimator import EcmEstimator, FittedModel
from mdfm.services.kalman_smoother import KalmanSmoother
from mdfm.services.panel_builder import PanelBuilder
from mdfm.services.simulator import Simulator, default_parameters
from mdfm.services.state_space import StateSpaceBuilder, generic_state_space


def gaussian_conditioning(ss, panel):
    """Smoothed moments by conditioning the joint Gaussian of (Phi_0..Phi_T, observed Y) directly.

    Returns means (T+1, q), covariances (T+1, q, q) and Cov(Phi_t, Phi_{t-1}) for t >= 1.
    """
    T, q = panel.T, ss.q
    Q = ss.Q
    mean = np.zeros((T + 1, q))
    K = np.zeros((T + 1, T + 1, q, q))
    mean[0] = ss.mu0
    K[0, 0] = ss.omega0
    for t in range(1, T + 1):
        mean[t] = ss.C @ mean[t - 1]
        for s in range(t):
            K[t, s] = ss.C @ K[t - 1, s]
            K[s, t] = K[t, s].T
        K[t, t] = ss.C @ K[t - 1, t - 1] @ ss.C.T + Q
    prior = K.transpose(0, 2, 1, 3).reshape((T + 1) * q, (T + 1) * q)
    prior_mean = mean.reshape(-1)

    B = ss.B
    rows, ys = [], []
    for t in range(1, T + 1):
        for i in np.flatnonzero(panel.mask[:, t - 1]):
            h = np.zeros((T + 1) * q)
            h[t * q:(t + 1) * q] = B[i]
            rows.append(h)
            ys.append(panel.values[i, t - 1])
    if rows:
        H = np.array(rows)
        S = H @ prior @ H.T + ss.epsilon * np.eye(len(rows))
        gain = linalg.solve(S, H @ prior, assume_a="pos").T
        post_mean = prior_mean + gain @ (np.array(ys) - H @ prior_mean)
        post = prior - gain @ H @ prior
    else:
        post_mean, post = prior_mean, prior

    means = post_mean.reshape(T + 1, q)
    blocks = post.reshape(T + 1, q, T + 1, q).transpose(0, 2, 1, 3)
    covs = np.array([blocks[t, t] for t in range(T + 1)])
    lag_one = np.zeros((T + 1, q, q))
    for t in range(1, T + 1):
        lag_one[t] = blocks[t, t - 1]
    return means, covs, lag_one


def random_system(seed: int):
    """Small random system with an n x T panel and a random mask"""
    rng = np.random.default_rng(seed)
    q = int(rng.integers(1, 9))
    r = int(rng.integers(1, q + 1))
    n = int(rng.integers(1, 5))
    T = int(rng.integers(1, 7))
    C = rng.normal(scale=0.5 / np.sqrt(q), size=(q, q))
    D = np.vstack([np.eye(r), np.zeros((q - r, r))])
    sigma = rng.uniform(0.2, 1.5, size=r)
    B = rng.normal(size=(n, q))
    A = rng.normal(size=(q, q))
    omega0 = A @ A.T / q + 0.5 * np.eye(q)
    mu0 = rng.normal(size=q)
    epsilon = float(rng.uniform(0.1, 1.0))
    ss = generic_state_space(C, D, sigma, B, mu0, omega0, epsilon)
    values = rng.normal(size=(n, T))
    mask = rng.random((n, T)) < 0.6
    panel = PanelBuilder().from_matrix(values, mask)
    return ss, panel


@pytest.fixture
def builder():
    return StateSpaceBuilder()


@pytest.fixture
def smoother(builder):
    return KalmanSmoother(builder)


@pytest.fixture
def estimator(builder):
    return EcmEstimator(builder=builder)


@pytest.fixture
def small_config():
    """Two macro series, two groups on two income trends, cycle of order two"""
    return ModelConfig(
        macro_series=["gdp", "prices"],
        groups=["low", "high"],
        trend_map=[[1, 0], [1, 1]],
        p=2,
        hyperparameters=Hyperparameters(rho=1.0, alpha=0.667, beta=1.326),
        epsilon=1e-2,
        max_iterations=20,
    )


@pytest.fixture
def small_simulation(small_config, builder):
    design = SimulationDesign(periods=16, group_sizes=[6, 6], rotation_length=4, seed=11)
    params = default_parameters(small_config)
    ss = builder.build_state_space(small_config, params, design.group_sizes)
    return Simulator().simulate(ss, design)


@pytest.fixture
def small_truth(small_simulation):
    """Truth parameters wrapped as a fitted model on the simulated layout"""
    return FittedModel(
        config=small_simulation.config,
        parameters=small_simulation.parameters,
        layout=small_simulation.panel.layout(),
        sample_end=small_simulation.panel.T,
    )
