import logging
from typing import Tuple

import numpy as np

from ..models.schemas import Hyperparameters
from .state_space import spectral_radius

logger = logging.getLogger(__name__)

# relative slack before a block at the causality limit is rescaled again
CAUSALITY_SLACK = 1e-12


def gamma_diagonal(hyperparameters: Hyperparameters, length: int) -> np.ndarray:
    """Diagonal of Gamma(gamma, l) = rho * diag(1, beta, ..., beta^(l-1))"""
    return hyperparameters.rho * hyperparameters.beta ** np.arange(length, dtype=float)


def gamma_matrix(hyperparameters: Hyperparameters, length: int) -> np.ndarray:
    return np.diag(gamma_diagonal(hyperparameters, length))


def penalty(pi: np.ndarray, loadings: np.ndarray, hyperparameters: Hyperparameters, n_idio: int) -> float:
    """Elastic-net penalty on the idiosyncratic AR(1) coefficients, the cycle AR(p) coefficients and Lambda.

    Squared terms use Gamma^(1/2), absolute terms use Gamma, so an entry with weight w
    contributes (1 - alpha)/2 * w * x^2 + alpha/2 * w * |x|.
    """
    pi = np.asarray(pi, dtype=float)
    loadings = np.atleast_2d(np.asarray(loadings, dtype=float))
    p = pi.size - n_idio
    alpha = hyperparameters.alpha
    weights_idio = gamma_diagonal(hyperparameters, 1)[0] * np.ones(n_idio)
    weights_cycle = gamma_diagonal(hyperparameters, p)
    weights_loadings = np.broadcast_to(gamma_diagonal(hyperparameters, p), loadings.shape)
    coefficients = np.concatenate([pi[:n_idio], pi[n_idio:], loadings.reshape(-1)])
    weights = np.concatenate([weights_idio, weights_cycle, weights_loadings.reshape(-1)])
    ridge = np.sum(weights * coefficients ** 2)
    lasso = np.sum(weights * np.abs(coefficients))
    return float(0.5 * (1.0 - alpha) * ridge + 0.5 * alpha * lasso)


def soft_threshold(x, threshold):
    """sign(x) * max(|x| - threshold, 0)"""
    return np.sign(x) * np.maximum(np.abs(x) - threshold, 0.0)


def enforce_causality(coefficients, limit: float = 0.98) -> np.ndarray:
    """Rescale an AR block so its companion spectral radius is at most `limit`.

    Lag k is multiplied by (limit / radius)^k, which shrinks every companion
    eigenvalue by the same factor and keeps their directions.
    """
    coefficients = np.atleast_1d(np.asarray(coefficients, dtype=float)).copy()
    radius = spectral_radius(coefficients)
    if radius <= limit * (1.0 + CAUSALITY_SLACK):
        return coefficients
    if coefficients.size == 1:
        return np.sign(coefficients) * limit
    scale = limit / radius
    return coefficients * scale ** np.arange(1, coefficients.size + 1)


def enforce_transition_causality(pi: np.ndarray, n_idio: int, limit: float = 0.98) -> Tuple[np.ndarray, int]:
    """Apply `enforce_causality` to every idiosyncratic AR(1) and to the cycle AR(p); returns the count of rescaled blocks"""
    pi = np.asarray(pi, dtype=float)
    out = pi.copy()
    rescaled = 0
    for i in range(n_idio):
        out[i] = enforce_causality(pi[i:i + 1], limit)[0]
        rescaled += int(out[i] != pi[i])
    cycle = enforce_causality(pi[n_idio:], limit)
    rescaled += int(not np.array_equal(cycle, pi[n_idio:]))
    out[n_idio:] = cycle
    if rescaled:
        logger.debug("Rescaled %d AR blocks to the causality limit %.3f", rescaled, limit)
    return out, rescaled
