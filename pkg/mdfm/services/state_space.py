import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..models.errors import CausalityError, DimensionError, LayoutError, NumericalError
from ..models.schemas import ModelConfig
from .panel_builder import PanelDataset

MODULE = "model"


def companion_matrix(coefficients: Sequence[float]) -> np.ndarray:
    """Companion form of an AR polynomial with coefficients (phi_1, ..., phi_p)"""
    coefficients = np.asarray(coefficients, dtype=float)
    p = coefficients.size
    companion = np.zeros((p, p))
    companion[0, :] = coefficients
    if p > 1:
        companion[1:, :-1] = np.eye(p - 1)
    return companion


def spectral_radius(coefficients: Sequence[float]) -> float:
    coefficients = np.asarray(coefficients, dtype=float)
    if coefficients.size == 0:
        return 0.0
    if coefficients.size == 1:
        return float(abs(coefficients[0]))
    return float(np.max(np.abs(np.linalg.eigvals(companion_matrix(coefficients)))))


@dataclass(frozen=True)
class StateIndex:
    """Positions of the state blocks: [trends | idio | psi lags | lagged trends]"""
    n_trend: int
    n_idio: int
    p: int

    @property
    def r(self) -> int:
        return self.n_trend + self.n_idio + 1

    @property
    def q(self) -> int:
        return 2 * self.n_trend + self.n_idio + self.p

    @property
    def trends(self) -> slice:
        return slice(0, self.n_trend)

    @property
    def idio(self) -> slice:
        return slice(self.n_trend, self.n_trend + self.n_idio)

    @property
    def psi(self) -> int:
        """Position of psi_t, i.e. r - 1 in 0-based terms"""
        return self.n_trend + self.n_idio

    @property
    def psi_lags(self) -> slice:
        return slice(self.psi, self.psi + self.p)

    @property
    def lagged_trends(self) -> slice:
        start = self.psi + self.p
        return slice(start, start + self.n_trend)

    @classmethod
    def from_config(cls, config: ModelConfig) -> "StateIndex":
        return cls(config.trend_count, config.idio_count, config.p)


def omega_pattern(index: StateIndex) -> np.ndarray:
    """Coordinates of Omega_0 allowed to differ from zero: diagonal before psi_t plus the psi-lag block"""
    pattern = np.zeros((index.q, index.q), dtype=bool)
    head = np.arange(index.r - 1)
    pattern[head, head] = True
    pattern[index.psi_lags, index.psi_lags] = True
    return pattern


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Free parameters: mu_0, the allowed entries of Omega_0, vec(Lambda), pi and diag(Sigma)"""
    mu0: np.ndarray
    omega0: np.ndarray
    loadings: np.ndarray
    pi: np.ndarray
    sigma: np.ndarray

    @property
    def p(self) -> int:
        return self.loadings.shape[1]

    def pack(self) -> np.ndarray:
        r, p = self.sigma.size, self.p
        head = np.diag(self.omega0)[: r - 1]
        psi = self.omega0[r - 1:r - 1 + p, r - 1:r - 1 + p]
        rows, cols = np.tril_indices(p)
        # vech runs column-major over the lower triangle
        order = np.lexsort((rows, cols))
        block = psi[rows[order], cols[order]]
        return np.concatenate([
            self.mu0,
            head,
            block,
            self.loadings.flatten(order="F"),
            self.pi,
            self.sigma,
        ])

    @classmethod
    def unpack(cls, config: ModelConfig, theta: Sequence[float]) -> "ParameterVector":
        index = StateIndex.from_config(config)
        theta = np.asarray(theta, dtype=float)
        expected = parameter_count(config)
        if theta.size != expected:
            raise DimensionError(f"Parameter vector has {theta.size} entries, expected {expected}", MODULE, "unpack")
        q, r, p = index.q, index.r, index.p
        at = 0
        mu0 = theta[at:at + q].copy()
        at += q
        omega0 = np.zeros((q, q))
        head = np.arange(r - 1)
        omega0[head, head] = theta[at:at + r - 1]
        at += r - 1
        rows, cols = np.tril_indices(p)
        order = np.lexsort((rows, cols))
        n_block = p * (p + 1) // 2
        block = np.zeros((p, p))
        block[rows[order], cols[order]] = theta[at:at + n_block]
        block = block + np.tril(block, -1).T
        omega0[index.psi_lags, index.psi_lags] = block
        at += n_block
        L = config.loading_rows
        loadings = theta[at:at + L * p].reshape((L, p), order="F").copy()
        at += L * p
        pi = theta[at:at + config.idio_count + p].copy()
        at += config.idio_count + p
        sigma = theta[at:at + r].copy()
        return cls(mu0=mu0, omega0=omega0, loadings=loadings, pi=pi, sigma=sigma)

    def describe(self, config: ModelConfig) -> Dict[str, float]:
        return dict(zip(parameter_names(config), self.pack().tolist()))

    def copy(self, **changes) -> "ParameterVector":
        fields = {
            "mu0": self.mu0.copy(),
            "omega0": self.omega0.copy(),
            "loadings": self.loadings.copy(),
            "pi": self.pi.copy(),
            "sigma": self.sigma.copy(),
        }
        fields.update({name: np.array(value, dtype=float) for name, value in changes.items()})
        return ParameterVector(**fields)


def parameter_count(config: ModelConfig) -> int:
    index = StateIndex.from_config(config)
    p = config.p
    return index.q + (index.r - 1) + p * (p + 1) // 2 + config.loading_rows * p + config.idio_count + p + index.r


def parameter_names(config: ModelConfig) -> List[str]:
    """Readable name for every coordinate of the packed vector"""
    index = StateIndex.from_config(config)
    states = state_names(config)
    names = [f"mu0[{name}]" for name in states]
    names += [f"omega0[{states[i]},{states[i]}]" for i in range(index.r - 1)]
    rows, cols = np.tril_indices(config.p)
    for i, j in sorted(zip(rows, cols), key=lambda pair: (pair[1], pair[0])):
        names.append(f"omega0[{states[index.psi + i]},{states[index.psi + j]}]")
    loading_series = list(config.macro_series[1:]) + list(config.groups)
    for j in range(config.p):
        names += [f"lambda[{series},lag{j}]" for series in loading_series]
    names += [f"pi[xi:{name}]" for name in list(config.macro_series) + list(config.groups)]
    names += [f"pi[psi,lag{j + 1}]" for j in range(config.p)]
    names += [f"sigma[{states[i]}]" for i in range(index.r)]
    return names


def state_names(config: ModelConfig) -> List[str]:
    trends = [f"tau:{name}" for name in config.macro_series]
    trends += [f"tau:income{k + 1}" for k in range(config.n_income_trends)]
    idio = [f"xi:{name}" for name in list(config.macro_series) + list(config.groups)]
    psi = ["psi"] + [f"psi(-{j})" for j in range(1, config.p)]
    lagged = [f"{name}(-1)" for name in trends]
    return trends + idio + psi + lagged


@dataclass(frozen=True, eq=False)
class StateSpace:
    """Y_t = B Phi_t + e_t, Phi_t = C Phi_{t-1} + D u_t with R = epsilon I and diagonal Sigma.

    B is stored as its distinct rows (macro rows, then one row per group) plus a
    row map, so every member of a group shares the very same row.
    """
    config: ModelConfig
    index: StateIndex
    B_rows: np.ndarray
    row_map: np.ndarray
    C: np.ndarray
    D: np.ndarray
    sigma: np.ndarray
    mu0: np.ndarray
    omega0: np.ndarray
    pi: np.ndarray
    loadings: np.ndarray
    epsilon: float

    @property
    def q(self) -> int:
        return self.index.q

    @property
    def r(self) -> int:
        return self.index.r

    @property
    def B(self) -> np.ndarray:
        return self.B_rows[self.row_map]

    @property
    def Sigma(self) -> np.ndarray:
        return np.diag(self.sigma)

    @property
    def Q(self) -> np.ndarray:
        """State innovation covariance D Sigma D'"""
        return (self.D * self.sigma) @ self.D.T

    def parameters(self) -> ParameterVector:
        return ParameterVector(
            mu0=self.mu0.copy(),
            omega0=self.omega0.copy(),
            loadings=self.loadings.copy(),
            pi=self.pi.copy(),
            sigma=self.sigma.copy(),
        )


def generic_state_space(C, D, sigma, B, mu0, omega0, epsilon: float) -> StateSpace:
    """Unstructured system with every row of B distinct; used by toy systems and oracles"""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    q = C.shape[0]
    if C.shape != (q, q) or D.shape != (q, sigma.size) or B.shape[1] != q or sigma.size > q:
        raise DimensionError(
            f"Inconsistent shapes C{C.shape}, D{D.shape}, Sigma({sigma.size}), B{B.shape}", MODULE, "generic_state_space"
        )
    config = ModelConfig(macro_series=[f"y{i + 1}" for i in range(B.shape[0])], p=1)
    return StateSpace(
        config=config,
        # the first r states carry innovations, the rest are treated as lags
        index=StateIndex(0, sigma.size - 1, q - sigma.size + 1),
        B_rows=B,
        row_map=np.arange(B.shape[0]),
        C=C,
        D=D,
        sigma=sigma,
        mu0=np.atleast_1d(np.asarray(mu0, dtype=float)),
        omega0=np.atleast_2d(np.asarray(omega0, dtype=float)),
        pi=np.zeros(0),
        loadings=np.zeros((0, 0)),
        epsilon=float(epsilon),
    )


class StateSpaceBuilder:
    """Service that assembles the sparse system matrices from a configuration and a parameter vector"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.logger.info("Initializing StateSpaceBuilder")

    def dims(self, config: ModelConfig) -> Tuple[int, int]:
        """(q, r): q = 2 trends + idio + p, r = trends + idio + 1"""
        index = StateIndex.from_config(config)
        return index.q, index.r

    def transition(self, config: ModelConfig, pi: Sequence[float]) -> np.ndarray:
        index = StateIndex.from_config(config)
        pi = np.asarray(pi, dtype=float)
        C = np.zeros((index.q, index.q))
        trends = np.arange(index.n_trend)
        lagged = trends + index.lagged_trends.start
        # smooth trend of order two: tau_t = 2 tau_{t-1} - tau_{t-2} + u_t
        C[trends, trends] = 2.0
        C[trends, lagged] = -1.0
        idio = np.arange(index.idio.start, index.idio.stop)
        C[idio, idio] = pi[:index.n_idio]
        C[index.psi, index.psi_lags] = pi[index.n_idio:]
        for j in range(1, index.p):
            C[index.psi + j, index.psi + j - 1] = 1.0
        C[lagged, trends] = 1.0
        return C

    def selector(self, config: ModelConfig) -> np.ndarray:
        index = StateIndex.from_config(config)
        D = np.zeros((index.q, index.r))
        D[np.arange(index.r), np.arange(index.r)] = 1.0
        return D

    def measurement_rows(self, config: ModelConfig, loadings: np.ndarray) -> np.ndarray:
        """Distinct rows of B: one per macro series, then one per group"""
        index = StateIndex.from_config(config)
        M, G = config.M, config.G
        rows = np.zeros((M + G, index.q))
        for m in range(M):
            rows[m, m] = 1.0
            rows[m, index.idio.start + m] = 1.0
            if m == 0:
                rows[m, index.psi] = 1.0
            else:
                rows[m, index.psi_lags] = loadings[m - 1]
        trend_map = np.asarray(config.trend_map, dtype=float).reshape(G, config.n_income_trends)
        for g in range(G):
            rows[M + g, M:M + config.n_income_trends] = trend_map[g]
            rows[M + g, index.idio.start + M + g] = 1.0
            rows[M + g, index.psi_lags] = loadings[M - 1 + g]
        return rows

    def row_map(self, config: ModelConfig, group_sizes: Optional[Sequence[int]] = None) -> np.ndarray:
        sizes = list(group_sizes if group_sizes is not None else (config.group_sizes or []))
        if config.G and len(sizes) != config.G:
            raise LayoutError(f"Group sizes unknown for {config.G} groups", MODULE, "build_state_space")
        if config.characteristics != 1:
            raise LayoutError(
                f"The household model needs one characteristic per subject, got K={config.characteristics}",
                MODULE, "build_state_space",
            )
        parts = [np.arange(config.M)]
        parts += [np.full(size, config.M + g) for g, size in enumerate(sizes)]
        return np.concatenate(parts).astype(int)

    def build_state_space(self, config: ModelConfig, params: ParameterVector,
                          group_sizes: Optional[Sequence[int]] = None) -> StateSpace:
        index = StateIndex.from_config(config)
        self.logger.debug("Building state space with q=%d, r=%d", index.q, index.r)
        if params.mu0.size != index.q or params.omega0.shape != (index.q, index.q):
            raise DimensionError(
                f"Initial conditions sized {params.mu0.size}/{params.omega0.shape} for q={index.q}",
                MODULE, "build_state_space",
            )
        if params.loadings.shape != (config.loading_rows, config.p):
            raise DimensionError(
                f"Loadings shaped {params.loadings.shape}, expected {(config.loading_rows, config.p)}",
                MODULE, "build_state_space",
            )
        if params.pi.size != index.n_idio + index.p or params.sigma.size != index.r:
            raise DimensionError("Transition parameters do not match the configuration", MODULE, "build_state_space")
        if not np.all(np.isfinite(params.pack())):
            raise NumericalError("Parameter vector has non-finite entries", MODULE, "build_state_space")
        if np.any(params.sigma <= 0):
            raise NumericalError(
                f"Innovation variances must be positive, got min {params.sigma.min():.3g}", MODULE, "build_state_space"
            )
        radii = [abs(v) for v in params.pi[:index.n_idio]] + [spectral_radius(params.pi[index.n_idio:])]
        if max(radii, default=0.0) >= 1.0:
            raise CausalityError(
                f"Transition blocks are not causal (largest companion radius {max(radii):.4f})",
                MODULE, "build_state_space",
            )
        pattern = omega_pattern(index)
        omega0 = np.where(pattern, params.omega0, 0.0)
        omega0 = 0.5 * (omega0 + omega0.T)
        mats = [
            self.measurement_rows(config, params.loadings),
            self.row_map(config, group_sizes),
            self.transition(config, params.pi),
            self.selector(config),
            params.sigma.copy(),
            params.mu0.copy(),
            omega0,
            params.pi.copy(),
            params.loadings.copy(),
        ]
        for mat in mats:
            mat.setflags(write=False)
        B_rows, row_map, C, D, sigma, mu0, omega0, pi, loadings = mats
        return StateSpace(
            config=config,
            index=index,
            B_rows=B_rows,
            row_map=row_map,
            C=C,
            D=D,
            sigma=sigma,
            mu0=mu0,
            omega0=omega0,
            pi=pi,
            loadings=loadings,
            epsilon=config.epsilon,
        )

    def measurement_at(self, ss: StateSpace, panel: PanelDataset, t: int) -> Tuple[np.ndarray, np.ndarray]:
        """(Y_t^obs, B_t^obs = A_t B) in ascending row order; empty outside T"""
        if t < 1 or t > panel.T:
            return np.zeros(0), np.zeros((0, ss.q))
        if panel.n_rows != ss.row_map.size:
            raise DimensionError(
                f"Panel has {panel.n_rows} rows but the system has {ss.row_map.size}", MODULE, "measurement_at"
            )
        rows = panel.observed_rows(t)
        return panel.values[rows, t - 1], ss.B_rows[ss.row_map[rows]]
