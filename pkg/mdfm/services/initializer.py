import logging

import numpy as np
import pandas as pd
from statsmodels.regression.linear_model import yule_walker
from statsmodels.tsa.filters.hp_filter import hpfilter

from ..models.errors import LayoutError, MdfmError, NumericalError
from ..models.schemas import ModelConfig
from .panel_builder import PanelDataset
from .penalty import enforce_causality
from .state_space import ParameterVector, StateIndex, omega_pattern

MODULE = "ecm"

# Hodrick-Prescott smoothing for quarterly data; the filter is the smoother of an order-two trend
# whose curvature variance is the cycle variance divided by this ratio
HP_LAMBDA_QUARTERLY = 1600.0
VARIANCE_FLOOR = 1e-6


class ParameterInitializer:
    """Deterministic starting values from macro series and group averages"""

    def __init__(self, smoothing: float = HP_LAMBDA_QUARTERLY):
        self.logger = logging.getLogger(__name__)
        self.smoothing = smoothing
        self.logger.info("Initializing ParameterInitializer")

    def group_means(self, panel: PanelDataset) -> pd.DataFrame:
        """T x G frame of per-time means over observed members; NaN where nobody is observed"""
        columns = {}
        for g, name in enumerate(panel.groups):
            rows = panel.group_slice(g)
            counts = panel.mask[rows].sum(axis=0)
            if counts.sum() == 0:
                raise LayoutError(f"Group '{name}' has no observations", MODULE, "initialize")
            totals = np.where(panel.mask[rows], panel.values[rows], 0.0).sum(axis=0)
            with np.errstate(invalid="ignore", divide="ignore"):
                columns[name] = np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)
        return pd.DataFrame(columns, index=pd.RangeIndex(1, panel.T + 1, name="time"))

    def initialize(self, panel: PanelDataset, config: ModelConfig) -> ParameterVector:
        self.logger.info("Initializing parameters for T=%d, M=%d, G=%d", panel.T, panel.M, panel.G)
        try:
            return self._initialize(panel, config)
        except MdfmError:
            raise
        except Exception as e:
            raise NumericalError(f"Error initializing parameters: {str(e)}", MODULE, "initialize") from e

    def detrend(self, frame: pd.DataFrame) -> pd.DataFrame:
        """Smooth trends column by column; gaps are interpolated before filtering"""
        filled = frame.interpolate(limit_direction="both")
        trend = pd.DataFrame(index=frame.index, columns=frame.columns, dtype=float)
        for name in frame.columns:
            series = filled[name].to_numpy(dtype=float)
            if series.size < 4:
                trend[name] = np.full(series.size, series.mean())
                continue
            _, trend[name] = hpfilter(series, lamb=self.smoothing)
        return trend

    def _macro_frame(self, panel: PanelDataset, config: ModelConfig) -> pd.DataFrame:
        M = config.M
        macro = pd.DataFrame(
            np.where(panel.mask[:M], panel.values[:M], np.nan).T,
            columns=list(config.macro_series),
            index=pd.RangeIndex(1, panel.T + 1, name="time"),
        )
        for name in macro.columns:
            if macro[name].notna().sum() == 0:
                raise LayoutError(f"Macro series '{name}' has no observations", MODULE, "initialize")
        return macro

    def _common_cycle(self, detrended_macro: pd.DataFrame) -> np.ndarray:
        """Leading principal component of the standardized macro block, in units of the first series"""
        standardized = (detrended_macro - detrended_macro.mean()) / detrended_macro.std(ddof=0).replace(0.0, 1.0)
        filled = standardized.fillna(0.0).to_numpy()
        u, s, _ = np.linalg.svd(filled, full_matrices=False)
        component = u[:, 0] * s[0]
        anchor = detrended_macro.iloc[:, 0].to_numpy()
        seen = np.isfinite(anchor)
        scale = np.dot(component[seen], anchor[seen]) / max(np.dot(component[seen], component[seen]), 1e-12)
        if abs(scale) < 1e-8:
            scale = np.nanstd(anchor) / max(np.std(component), 1e-12)
        return component * scale

    def initial_cycle(self, panel: PanelDataset, config: ModelConfig) -> np.ndarray:
        """Starting path of the common cycle for t = 1..T"""
        macro = self._macro_frame(panel, config)
        return self._common_cycle(macro - self.detrend(macro))

    def _initialize(self, panel: PanelDataset, config: ModelConfig) -> ParameterVector:
        index = StateIndex.from_config(config)
        M, G, p = config.M, config.G, config.p
        macro = self._macro_frame(panel, config)
        means = self.group_means(panel)

        # income trends are solved from the group trends through trend_map
        macro_trend = self.detrend(macro)
        income_trend = pd.DataFrame(index=macro.index, columns=[f"income{k + 1}" for k in range(config.n_income_trends)], dtype=float)
        group_trend = pd.DataFrame(index=macro.index, columns=means.columns, dtype=float)
        trend_map = np.asarray(config.trend_map, dtype=float).reshape(G, config.n_income_trends)
        if G:
            solution, *_ = np.linalg.lstsq(trend_map, self.detrend(means).to_numpy().T, rcond=None)
            income_trend.loc[:, :] = solution.T
            group_trend.loc[:, :] = (trend_map @ solution).T

        detrended = pd.concat([macro - macro_trend, means - group_trend], axis=1)
        psi = self._common_cycle(detrended.iloc[:, :M])
        anchor = detrended.iloc[:, 0].to_numpy()

        lags = np.column_stack([np.concatenate([np.full(j, np.nan), psi[:len(psi) - j]]) for j in range(p)])
        loadings = np.zeros((config.loading_rows, p))
        residuals = detrended.copy()
        residuals.iloc[:, 0] = anchor - psi
        for row in range(1, M + G):
            target = detrended.iloc[:, row].to_numpy()
            usable = np.isfinite(target) & np.isfinite(lags).all(axis=1)
            if usable.sum() > p:
                coefficients, *_ = np.linalg.lstsq(lags[usable], target[usable], rcond=None)
                loadings[row - 1] = coefficients
            fitted = np.nan_to_num(lags) @ loadings[row - 1]
            residuals.iloc[:, row] = target - fitted

        # idiosyncratic AR(1) and cycle AR(p) by Yule-Walker
        pi = np.zeros(index.n_idio + p)
        sigma = np.zeros(index.r)
        for i, name in enumerate(residuals.columns):
            series = residuals[name].dropna().to_numpy()
            coefficient, innovation_sd = self._yule_walker(series, 1)
            pi[i] = enforce_causality(coefficient, config.causality_limit)[0]
            sigma[index.idio.start + i] = max(innovation_sd ** 2, VARIANCE_FLOOR)
        cycle, cycle_sd = self._yule_walker(psi, p)
        pi[index.n_idio:] = enforce_causality(cycle, config.causality_limit)
        sigma[index.psi] = max(cycle_sd ** 2, VARIANCE_FLOOR)

        trends = pd.concat([macro_trend, income_trend], axis=1).to_numpy(dtype=float)
        # curvature variance implied by the smoothing ratio; income trends take the mean over their groups
        cycle_variance = detrended.var(ddof=0).fillna(0.0).to_numpy()
        sigma[:M] = cycle_variance[:M] / self.smoothing
        for k in range(config.n_income_trends):
            members = np.flatnonzero(trend_map[:, k])
            sigma[M + k] = cycle_variance[M + members].mean() / self.smoothing
        sigma[index.trends] = np.maximum(sigma[index.trends], VARIANCE_FLOOR)

        mu0 = np.zeros(index.q)
        first = trends[0]
        mu0[index.trends] = first
        mu0[index.lagged_trends] = first
        mu0[index.psi] = psi[0]
        omega0 = config.initial_state_variance * omega_pattern(index) * np.eye(index.q)
        omega0[index.psi_lags, index.psi_lags] = config.initial_state_variance * np.eye(p)

        params = ParameterVector(mu0=mu0, omega0=omega0, loadings=loadings, pi=pi, sigma=sigma)
        if not np.all(np.isfinite(params.pack())):
            raise NumericalError("Starting values are not finite", MODULE, "initialize")
        self.logger.info("Initial cycle AR coefficients: %s", np.array2string(pi[index.n_idio:], precision=3))
        return params

    @staticmethod
    def _yule_walker(series: np.ndarray, order: int):
        series = np.asarray(series, dtype=float)
        series = series[np.isfinite(series)]
        if series.size <= order + 1 or np.var(series) == 0:
            return np.zeros(order), float(np.std(series)) if series.size else 1.0
        coefficients, innovation_sd = yule_walker(series, order=order, method="mle")
        return np.atleast_1d(coefficients), float(innovation_sd)

