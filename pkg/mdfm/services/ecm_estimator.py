import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from dotenv import load_dotenv

from ..models.errors import (
    ConfigError,
    DegenerateUpdateError,
    DimensionError,
    LayoutError,
    MdfmError,
    NumericalError,
)
from ..models.schemas import FittedModelRecord, Hyperparameters, ModelConfig, PanelLayout, TraceRow
from .initializer import ParameterInitializer
from .kalman_smoother import KalmanSmoother, SmootherOutput
from .panel_builder import PanelDataset
from .penalty import enforce_transition_causality, gamma_diagonal, penalty, soft_threshold
from .state_space import (
    ParameterVector,
    StateIndex,
    StateSpace,
    StateSpaceBuilder,
    omega_pattern,
    parameter_names,
)

load_dotenv()

MODULE = "ecm"

# floor of the relative-change denominator in the convergence rule
RELATIVE_FLOOR = 1e-4
VARIANCE_CLAMP = 1e-12


@dataclass(frozen=True, eq=False)
class EcmWorkspace:
    """E-step statistics over the information set Y(s).

    Rows of B are grouped into distinct rows d: the M macro rows, then one per group.
    `row_weights[d, t-1]` is the observed indicator of a macro row or the number of
    observed members of a group, so `weighted_F[d]` is sum_t w_{d,t} F_t and
    `weighted_G[d]` is the macro row of G or the group row of the summed G.
    """
    index: StateIndex
    config: ModelConfig
    s: int
    E1: np.ndarray
    E2: np.ndarray
    E3: np.ndarray
    F: np.ndarray
    G_hat: np.ndarray
    observed: np.ndarray
    group_G: np.ndarray
    group_counts: np.ndarray
    row_weights: np.ndarray
    weighted_F: np.ndarray
    weighted_G: np.ndarray
    sum_y2: float
    n_observed: int
    means0: np.ndarray
    cov0: np.ndarray

    @property
    def r(self) -> int:
        return self.index.r

    @property
    def q(self) -> int:
        return self.index.q

    def transition_coordinates(self) -> List[Tuple[int, int]]:
        """Free entries of C in sweep order: idiosyncratic diagonal, then the cycle row"""
        idio = [(i, i) for i in range(self.index.idio.start, self.index.idio.stop)]
        cycle = [(self.index.psi, j) for j in range(self.index.psi, self.index.psi + self.index.p)]
        return idio + cycle

    def loading_coordinates(self) -> List[Tuple[int, int]]:
        """Entries of Lambda in column-major order"""
        rows = self.config.loading_rows
        return [(i, j) for j in range(self.index.p) for i in range(rows)]


@dataclass
class FittedModel:
    config: ModelConfig
    parameters: ParameterVector
    layout: PanelLayout
    trace: List[TraceRow] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    max_iterations_reached: bool = False
    sample_end: Optional[int] = None
    degenerate_loadings: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def objective(self) -> Optional[float]:
        return self.trace[-1].objective if self.trace else None

    @property
    def model_id(self) -> str:
        text = ",".join(f"{v:.17g}" for v in self.parameters.pack())
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    def state_space(self, builder: Optional[StateSpaceBuilder] = None) -> StateSpace:
        builder = builder or StateSpaceBuilder()
        return builder.build_state_space(self.config, self.parameters)

    def to_record(self) -> FittedModelRecord:
        return FittedModelRecord(
            config=self.config,
            parameters=self.parameters.pack().tolist(),
            parameter_names=parameter_names(self.config),
            trace=list(self.trace),
            converged=self.converged,
            iterations=self.iterations,
            max_iterations_reached=self.max_iterations_reached,
            sample_end=self.sample_end,
            layout=self.layout,
        )

    @classmethod
    def from_record(cls, record: FittedModelRecord) -> "FittedModel":
        return cls(
            config=record.config,
            parameters=ParameterVector.unpack(record.config, record.parameters),
            layout=record.layout,
            trace=list(record.trace),
            converged=record.converged,
            iterations=record.iterations,
            max_iterations_reached=record.max_iterations_reached,
            sample_end=record.sample_end,
        )


def check_convergence(old, new, tolerance_median: float = 1e-3, tolerance_q95: float = 1e-2) -> Tuple[bool, float, float]:
    """Median and 95th quantile of |new - old| / max(|old|, 1e-4) against their tolerances"""
    old = np.asarray(old, dtype=float)
    new = np.asarray(new, dtype=float)
    if old.shape != new.shape:
        raise DimensionError(f"Cannot compare vectors of shapes {old.shape} and {new.shape}", MODULE, "check_convergence")
    if old.size == 0:
        return True, 0.0, 0.0
    relative = np.abs(new - old) / np.maximum(np.abs(old), RELATIVE_FLOOR)
    median = float(np.median(relative))
    q95 = float(np.quantile(relative, 0.95))
    return median < tolerance_median and q95 < tolerance_q95, median, q95


class EcmEstimator:
    """Penalized quasi-maximum-likelihood estimation by expectation / conditional maximization"""

    def __init__(
        self,
        builder: Optional[StateSpaceBuilder] = None,
        smoother: Optional[KalmanSmoother] = None,
        initializer: Optional[ParameterInitializer] = None,
    ):
        self.logger = logging.getLogger(__name__)
        self.builder = builder or StateSpaceBuilder()
        self.smoother = smoother or KalmanSmoother(self.builder)
        self.initializer = initializer or ParameterInitializer()
        env_iterations = os.getenv("MDFM_MAX_ITERATIONS")
        self.default_max_iterations = int(env_iterations) if env_iterations else None
        self.logger.info("Initializing EcmEstimator")

    # -- E-step ---------------------------------------------------------------

    def e_step(self, ss: StateSpace, smo: SmootherOutput, panel: PanelDataset,
               s: Optional[int] = None) -> EcmWorkspace:
        s = panel.T if s is None else s
        q, r = ss.q, ss.r
        if smo.q != q or smo.T < s or panel.T < s or s < 1:
            raise DimensionError(
                f"Smoother output (T={smo.T}, q={smo.q}) does not cover s={s} for q={q}", MODULE, "e_step"
            )
        if panel.n_rows != ss.row_map.size:
            raise DimensionError(f"Panel has {panel.n_rows} rows, system has {ss.row_map.size}", MODULE, "e_step")
        means = smo.means[:s + 1]
        F = np.einsum("ti,tj->tij", means, means) + smo.covs[:s + 1]
        cross = np.einsum("ti,tj->tij", means[1:], means[:-1]) + smo.lag_one[1:s + 1]
        E1 = F[1:, :r, :r].sum(axis=0)
        E2 = cross[:, :r, :].sum(axis=0)
        E3 = F[:-1].sum(axis=0)

        observed = panel.mask[:, :s]
        Y = np.where(observed, panel.values[:, :s], 0.0)
        G_hat = Y @ means[1:]

        M, G = panel.M, panel.G
        group_G = np.array([G_hat[panel.group_slice(g)].sum(axis=0) for g in range(G)]).reshape(G, q)
        group_counts = np.array([observed[panel.group_slice(g)].sum(axis=0) for g in range(G)]).reshape(G, s)
        row_weights = np.vstack([observed[:M].astype(float), group_counts.astype(float)])
        weighted_F = np.einsum("dt,tij->dij", row_weights, F[1:])
        weighted_G = np.vstack([G_hat[:M], group_G])

        return EcmWorkspace(
            index=ss.index,
            config=ss.config,
            s=s,
            E1=0.5 * (E1 + E1.T),
            E2=E2,
            E3=0.5 * (E3 + E3.T),
            F=F,
            G_hat=G_hat,
            observed=observed,
            group_G=group_G,
            group_counts=group_counts,
            row_weights=row_weights,
            weighted_F=weighted_F,
            weighted_G=weighted_G,
            sum_y2=float(np.sum(Y ** 2)),
            n_observed=int(observed.sum()),
            means0=smo.means[0].copy(),
            cov0=smo.covs[0].copy(),
        )

    # -- CM-steps ---------------------------------------------------------------

    def cm_step_initial(self, ws: EcmWorkspace, smo: SmootherOutput) -> Tuple[np.ndarray, np.ndarray]:
        """mu_0 = smoothed Phi_0; Omega_0 = smoothed P_0 on the allowed coordinates"""
        pattern = omega_pattern(ws.index)
        return smo.means[0].copy(), np.where(pattern, smo.covs[0], 0.0)

    def cm_step_transition(self, ws: EcmWorkspace, sigma: np.ndarray, hyperparameters: Hyperparameters,
                           C: np.ndarray) -> np.ndarray:
        """Coordinate-wise penalized update of the free transition entries; returns the updated C"""
        index = ws.index
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma[:ws.r] <= 0):
            raise NumericalError("Innovation variances must be positive", MODULE, "cm_step_transition")
        C = np.array(C, dtype=float)
        alpha = hyperparameters.alpha
        weights = np.zeros(ws.q)
        weights[index.idio] = hyperparameters.rho
        weights[index.psi_lags] = gamma_diagonal(hyperparameters, index.p)
        for i, j in ws.transition_coordinates():
            precision = 1.0 / sigma[i]
            cross = C[i] @ ws.E3[:, j] - C[i, j] * ws.E3[j, j]
            numerator = precision * (ws.E2[i, j] - cross)
            denominator = precision * ws.E3[j, j] + (1.0 - alpha) * weights[j]
            if denominator == 0:
                raise DegenerateUpdateError(
                    f"Zero denominator updating C[{i},{j}]", MODULE, "cm_step_transition"
                )
            C[i, j] = soft_threshold(numerator, 0.5 * alpha * weights[j]) / denominator
        return C

    def transition_coefficients(self, ws: EcmWorkspace, C: np.ndarray) -> np.ndarray:
        """pi read back from C: idiosyncratic diagonal then the cycle row"""
        index = ws.index
        idio = np.arange(index.idio.start, index.idio.stop)
        return np.concatenate([C[idio, idio], C[index.psi, index.psi_lags]])

    def cm_step_innovations(self, ws: EcmWorkspace, C: np.ndarray, s: Optional[int] = None) -> np.ndarray:
        s = ws.s if s is None else s
        C_star = np.asarray(C, dtype=float)[:ws.r]
        expected = ws.E1 - ws.E2 @ C_star.T - C_star @ ws.E2.T + C_star @ ws.E3 @ C_star.T
        sigma = np.diag(expected) / s
        if np.any(sigma < -VARIANCE_CLAMP):
            worst = int(np.argmin(sigma))
            raise NumericalError(
                f"Negative innovation variance {sigma[worst]:.3g} at state {worst}", MODULE, "cm_step_innovations"
            )
        return np.maximum(sigma, VARIANCE_CLAMP)

    def cm_step_loadings(self, ws: EcmWorkspace, hyperparameters: Hyperparameters, B_rows: np.ndarray,
                         epsilon: float) -> Tuple[np.ndarray, List[Tuple[int, int]]]:
        """Entry-wise penalized update of Lambda in column-major order.

        Loading row i is the (i+1)-th distinct row of B: macro series 2..M, then the groups.
        Returns the new Lambda and the coordinates left unchanged for lack of information.
        """
        index = ws.index
        rows = np.array(B_rows, dtype=float)
        alpha = hyperparameters.alpha
        weights = gamma_diagonal(hyperparameters, index.p)
        degenerate = []
        for i, j in ws.loading_coordinates():
            d, col = i + 1, index.psi + j
            WF, b = ws.weighted_F[d], rows[d]
            information = WF[col, col]
            numerator = ws.weighted_G[d, col] - (WF[col] @ b - information * b[col])
            denominator = epsilon * (1.0 - alpha) * weights[j] + information
            if denominator <= 0:
                degenerate.append((i, j))
                continue
            rows[d, col] = soft_threshold(numerator, 0.5 * epsilon * alpha * weights[j]) / denominator
        if degenerate:
            self.logger.warning("Left %d loadings unchanged: their rows are never observed", len(degenerate))
        loadings = rows[1:1 + ws.config.loading_rows, index.psi_lags].copy()
        return loadings, degenerate

    # -- objectives ---------------------------------------------------------------

    def objective(self, ss: StateSpace, panel: PanelDataset, hyperparameters: Optional[Hyperparameters] = None) -> float:
        """Observed-data quasi log-likelihood minus the penalty"""
        hyperparameters = hyperparameters or ss.config.hyperparameters
        return self.smoother.quasi_loglik(ss, panel) - penalty(ss.pi, ss.loadings, hyperparameters, ss.index.n_idio)

    def expected_objective(self, ws: EcmWorkspace, params: ParameterVector,
                           hyperparameters: Optional[Hyperparameters] = None) -> float:
        """Expected penalized complete-data log-likelihood at `params`, up to the usual constants"""
        config, index = ws.config, ws.index
        hyperparameters = hyperparameters or config.hyperparameters
        C = self.builder.transition(config, params.pi)
        B_rows = self.builder.measurement_rows(config, params.loadings)
        epsilon = config.epsilon

        # initial conditions on the support of Omega_0
        support = np.flatnonzero(np.diag(omega_pattern(index)) & (np.diag(params.omega0) > 0))
        initial = 0.0
        if support.size:
            omega = params.omega0[np.ix_(support, support)]
            deviation = ws.means0[support] - params.mu0[support]
            second = ws.cov0[np.ix_(support, support)] + np.outer(deviation, deviation)
            sign, log_det = np.linalg.slogdet(omega)
            if sign <= 0:
                raise NumericalError("Omega_0 is not positive definite on its support", MODULE, "expected_objective")
            initial = -0.5 * log_det - 0.5 * np.trace(np.linalg.solve(omega, second))

        C_star = C[:index.r]
        expected = ws.E1 - ws.E2 @ C_star.T - C_star @ ws.E2.T + C_star @ ws.E3 @ C_star.T
        transition = -0.5 * ws.s * np.sum(np.log(params.sigma)) - 0.5 * np.sum(np.diag(expected) / params.sigma)

        quadratic = sum(b @ WF @ b for b, WF in zip(B_rows, ws.weighted_F))
        linear = float(np.sum(B_rows * ws.weighted_G))
        measurement = -0.5 * ws.n_observed * np.log(epsilon) - (ws.sum_y2 - 2.0 * linear + quadratic) / (2.0 * epsilon)

        return float(initial + transition + measurement
                     - penalty(params.pi, params.loadings, hyperparameters, index.n_idio))

    # -- driver ---------------------------------------------------------------

    def initialize(self, panel: PanelDataset, config: ModelConfig) -> ParameterVector:
        return self.initializer.initialize(panel, config)

    def _aligned_config(self, panel: PanelDataset, config: ModelConfig) -> ModelConfig:
        if tuple(config.macro_series) != panel.macro_series or tuple(config.groups) != panel.groups:
            raise ConfigError("Panel series or groups differ from the model configuration", MODULE, "estimate")
        if panel.characteristics != 1 and panel.G:
            raise LayoutError(
                f"Micro rows need one characteristic per subject, got K={panel.characteristics}", MODULE, "estimate"
            )
        if config.group_sizes is not None and tuple(config.group_sizes) != panel.group_sizes:
            raise LayoutError(
                f"Configured group sizes {config.group_sizes} differ from the panel's {list(panel.group_sizes)}",
                MODULE, "estimate",
            )
        return config.with_group_sizes(list(panel.group_sizes))

    def estimate(
        self,
        panel: PanelDataset,
        config: ModelConfig,
        initial: Optional[ParameterVector] = None,
        sample_end: Optional[int] = None,
        max_iterations: Optional[int] = None,
    ) -> FittedModel:
        """Run the ECM loop on Y(s), s = sample_end or T, until convergence or the iteration cap"""
        config = self._aligned_config(panel, config)
        s = panel.T if sample_end is None else sample_end
        info = panel if s == panel.T else panel.restrict(s)
        if max_iterations is None:
            max_iterations = self.default_max_iterations if self.default_max_iterations is not None else config.max_iterations
        hyperparameters = config.hyperparameters
        index = StateIndex.from_config(config)
        self.logger.info(
            "Estimating with T=%d (s=%d), q=%d, r=%d, %d observed cells, max %d iterations",
            panel.T, s, index.q, index.r, int(info.mask.sum()), max_iterations,
        )

        params = initial if initial is not None else self.initialize(info, config)
        pi, rescaled = enforce_transition_causality(params.pi, index.n_idio, config.causality_limit)
        if rescaled:
            self.logger.warning("Starting values rescaled to the causality limit in %d blocks", rescaled)
            params = params.copy(pi=pi)

        iteration = 0
        try:
            ss = self.builder.build_state_space(config, params)
            smo = self.smoother.smooth(ss, info)
            trace = [TraceRow(
                iteration=0,
                objective=smo.loglik - penalty(params.pi, params.loadings, hyperparameters, index.n_idio),
                median_delta=None,
                q95_delta=None,
            )]
            converged = False
            degenerate: List[Tuple[int, int]] = []
            for iteration in range(1, max_iterations + 1):
                ws = self.e_step(ss, smo, info, s)
                mu0, omega0 = self.cm_step_initial(ws, smo)
                C = self.cm_step_transition(ws, ss.sigma, hyperparameters, ss.C)
                pi, rescaled = enforce_transition_causality(
                    self.transition_coefficients(ws, C), index.n_idio, config.causality_limit
                )
                if rescaled:
                    self.logger.warning("Iteration %d: rescaled %d AR blocks to the causality limit", iteration, rescaled)
                sigma = self.cm_step_innovations(ws, self.builder.transition(config, pi), s)
                loadings, degenerate = self.cm_step_loadings(ws, hyperparameters, ss.B_rows, config.epsilon)
                updated = ParameterVector(mu0=mu0, omega0=omega0, loadings=loadings, pi=pi, sigma=sigma)

                converged, median, q95 = check_convergence(
                    params.pack(), updated.pack(), config.tolerance_median, config.tolerance_q95
                )
                params = updated
                ss = self.builder.build_state_space(config, params)
                smo = self.smoother.smooth(ss, info)
                value = smo.loglik - penalty(params.pi, params.loadings, hyperparameters, index.n_idio)
                trace.append(TraceRow(iteration=iteration, objective=value, median_delta=median, q95_delta=q95))
                self.logger.debug(
                    "Iteration %d: objective=%.10g median=%.3g q95=%.3g", iteration, value, median, q95
                )
                gain = value - trace[-2].objective
                settled = gain <= config.tolerance_objective * max(1.0, abs(value))
                if converged and not settled:
                    self.logger.debug("Iteration %d: parameters settled but the objective still gains %.3g", iteration, gain)
                converged = converged and settled
                if converged:
                    break
        except NumericalError as e:
            e.iteration = iteration
            self.logger.error("Estimation failed at iteration %d: %s", iteration, e.message)
            raise
        except MdfmError:
            raise
        except Exception as e:
            raise NumericalError(
                f"Error during estimation: {str(e)}", MODULE, "estimate", iteration=iteration
            ) from e

        iterations = len(trace) - 1
        reached = not converged
        if reached:
            self.logger.warning("ECM stopped at the iteration cap (%d) without converging", max_iterations)
        else:
            self.logger.info("ECM converged after %d iterations, objective %.10g", iterations, trace[-1].objective)
        return FittedModel(
            config=config,
            parameters=params,
            layout=panel.layout(),
            trace=trace,
            converged=converged,
            iterations=iterations,
            max_iterations_reached=reached,
            sample_end=s,
            degenerate_loadings=degenerate,
        )
