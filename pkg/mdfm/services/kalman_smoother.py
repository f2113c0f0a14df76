import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from ..models.errors import DimensionError, MdfmError, NumericalError
from .panel_builder import PanelDataset
from .state_space import StateSpace, StateSpaceBuilder

MODULE = "smoother"

# innovation covariances with a larger condition estimate are treated as singular
CONDITION_LIMIT = 1e14
LOG_2PI = np.log(2.0 * np.pi)


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


@dataclass(frozen=True, eq=False)
class FilterOutput:
    """Predicted and filtered moments for t = 0..T; row 0 holds (mu_0, Omega_0) in both"""
    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    loglik: float
    n_observed: np.ndarray

    @property
    def T(self) -> int:
        return self.filtered_means.shape[0] - 1


@dataclass(frozen=True, eq=False)
class SmootherOutput:
    """Smoothed means and covariances for t = 0..T, lag-one covariances Cov(Phi_t, Phi_{t-1}) for t = 1..T.

    `lag_one[0]` is unused and left at zero.
    """
    means: np.ndarray
    covs: np.ndarray
    lag_one: np.ndarray
    loglik: float

    @property
    def T(self) -> int:
        return self.means.shape[0] - 1

    @property
    def q(self) -> int:
        return self.means.shape[1]

    def second_moment(self, t: int) -> np.ndarray:
        """F_t = Phi_t Phi_t' + P_t"""
        return np.outer(self.means[t], self.means[t]) + self.covs[t]

    def cross_moment(self, t: int) -> np.ndarray:
        """Phi_t Phi_{t-1}' + P_{t,t-1}"""
        return np.outer(self.means[t], self.means[t - 1]) + self.lag_one[t]


class KalmanSmoother:
    """Kalman filter and fixed-interval smoother over time-varying observed row sets"""

    def __init__(self, builder: Optional[StateSpaceBuilder] = None):
        self.logger = logging.getLogger(__name__)
        self.builder = builder or StateSpaceBuilder()
        self.logger.info("Initializing KalmanSmoother")

    def filter(self, ss: StateSpace, panel: PanelDataset) -> FilterOutput:
        """Forward pass; times with no observed rows only predict"""
        T, q = panel.T, ss.q
        if T < 1:
            raise DimensionError("Filtering needs at least one period", MODULE, "filter")
        if ss.mu0.shape != (q,) or ss.omega0.shape != (q, q):
            raise DimensionError(f"Initial conditions do not match q={q}", MODULE, "filter")
        self.logger.debug("Filtering T=%d, q=%d, %d observed cells", T, q, int(panel.mask.sum()))

        C, Q, eps = ss.C, ss.Q, ss.epsilon
        identity = np.eye(q)
        pred_m = np.zeros((T + 1, q))
        pred_P = np.zeros((T + 1, q, q))
        filt_m = np.zeros((T + 1, q))
        filt_P = np.zeros((T + 1, q, q))
        n_observed = np.zeros(T + 1, dtype=int)
        pred_m[0] = filt_m[0] = ss.mu0
        pred_P[0] = filt_P[0] = symmetrize(np.asarray(ss.omega0, dtype=float))
        loglik = 0.0

        a, P = filt_m[0], filt_P[0]
        for t in range(1, T + 1):
            a_pred = C @ a
            P_pred = symmetrize(C @ P @ C.T + Q)
            pred_m[t], pred_P[t] = a_pred, P_pred
            y, B_obs = self.builder.measurement_at(ss, panel, t)
            n = y.size
            n_observed[t] = n
            if n:
                v = y - B_obs @ a_pred
                PBt = P_pred @ B_obs.T
                S = symmetrize(B_obs @ PBt + eps * np.eye(n))
                factor = self._factorize(S, t)
                gain = linalg.cho_solve(factor, PBt.T).T
                a = a_pred + gain @ v
                # Joseph form
                IKB = identity - gain @ B_obs
                P = symmetrize(IKB @ P_pred @ IKB.T + eps * gain @ gain.T)
                log_det = 2.0 * np.sum(np.log(np.diag(factor[0])))
                loglik += -0.5 * (n * LOG_2PI + log_det + v @ linalg.cho_solve(factor, v))
            else:
                a, P = a_pred, P_pred
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(P))):
                self.logger.error("Non-finite filtered moments at t=%d", t)
                raise NumericalError(f"Non-finite filtered moments at time {t}", MODULE, "filter", time=t)
            filt_m[t], filt_P[t] = a, P

        if not np.isfinite(loglik):
            raise NumericalError("Non-finite log-likelihood", MODULE, "filter")
        return FilterOutput(
            predicted_means=pred_m,
            predicted_covs=pred_P,
            filtered_means=filt_m,
            filtered_covs=filt_P,
            loglik=float(loglik),
            n_observed=n_observed,
        )

    def _factorize(self, S: np.ndarray, t: int):
        try:
            factor = linalg.cho_factor(S, lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError) as e:
            self.logger.error("Innovation covariance not positive definite at t=%d", t)
            raise NumericalError(
                f"Error factorizing innovation covariance at time {t}: {str(e)}", MODULE, "filter", time=t
            ) from e
        diagonal = np.abs(np.diag(factor[0]))
        if diagonal.min() <= 0 or (diagonal.max() / diagonal.min()) ** 2 > CONDITION_LIMIT:
            raise NumericalError(f"Singular innovation covariance at time {t}", MODULE, "filter", time=t)
        return factor

    def smooth(self, ss: StateSpace, panel: PanelDataset) -> SmootherOutput:
        """Rauch-Tung-Striebel backward pass including t = 0 and the lag-one covariances"""
        try:
            fo = self.filter(ss, panel)
        except MdfmError as e:
            if e.module == MODULE and e.operation == "filter":
                e.operation = "smooth"
            raise
        T, q = fo.T, ss.q
        means = np.zeros((T + 1, q))
        covs = np.zeros((T + 1, q, q))
        lag_one = np.zeros((T + 1, q, q))
        means[T], covs[T] = fo.filtered_means[T], fo.filtered_covs[T]
        C = ss.C
        for t in range(T - 1, -1, -1):
            # predicted covariances can be singular (zero-variance lagged trends), hence the pseudo-inverse
            J = fo.filtered_covs[t] @ C.T @ linalg.pinvh(fo.predicted_covs[t + 1])
            means[t] = fo.filtered_means[t] + J @ (means[t + 1] - fo.predicted_means[t + 1])
            covs[t] = symmetrize(fo.filtered_covs[t] + J @ (covs[t + 1] - fo.predicted_covs[t + 1]) @ J.T)
            lag_one[t + 1] = covs[t + 1] @ J.T
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs))):
            bad = int(np.flatnonzero(~np.isfinite(means).all(axis=1) | ~np.isfinite(covs).all(axis=(1, 2)))[0])
            raise NumericalError(f"Non-finite smoothed moments at time {bad}", MODULE, "smooth", time=bad)
        self.logger.debug("Smoothed T=%d, loglik=%.6f", T, fo.loglik)
        return SmootherOutput(means=means, covs=covs, lag_one=lag_one, loglik=fo.loglik)

    def quasi_loglik(self, ss: StateSpace, panel: PanelDataset) -> float:
        """Gaussian prediction-error decomposition over observed rows"""
        return self.filter(ss, panel).loglik
