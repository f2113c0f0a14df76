import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from ..models.errors import ConfigError, DimensionError, MdfmError, NumericalError
from .ecm_estimator import FittedModel
from .kalman_smoother import KalmanSmoother, SmootherOutput
from .panel_builder import PanelDataset
from .state_space import StateSpace

MODULE = "analysis"

DECOMPOSITION_COLUMNS = ["entity", "time", "observed", "trend", "common", "idio", "residual"]
SUMMARY_COLUMNS = ["group", "time", "mean", "q25", "q75", "trend", "core"]


@dataclass(frozen=True, eq=False)
class Decomposition:
    """Per-entity, per-time split of the signal into trend, common cycle and idiosyncratic cycle.

    Macro series appear at every time; micro subjects only where observed.
    `residual` is NaN wherever `observed` is.
    """
    frame: pd.DataFrame
    smoothed: SmootherOutput

    def entity(self, name: str) -> pd.DataFrame:
        rows = self.frame[self.frame["entity"] == name]
        if rows.empty:
            raise ConfigError(f"Unknown entity '{name}'", MODULE, "decompose")
        return rows.set_index("time")


class Decomposer:
    """Service for historical decompositions and group core drivers of a fitted model"""

    def __init__(self, smoother: Optional[KalmanSmoother] = None):
        self.logger = logging.getLogger(__name__)
        self.smoother = smoother or KalmanSmoother()
        self.logger.info("Initializing Decomposer")

    def _system(self, fitted: FittedModel, panel: PanelDataset) -> StateSpace:
        if tuple(fitted.config.macro_series) != panel.macro_series or tuple(fitted.config.groups) != panel.groups:
            raise ConfigError("Panel series or groups differ from the fitted model", MODULE, "decompose")
        return self.smoother.builder.build_state_space(fitted.config, fitted.parameters, panel.group_sizes)

    def _smooth(self, fitted: FittedModel, panel: PanelDataset, smoothed: Optional[SmootherOutput]):
        ss = self._system(fitted, panel)
        if smoothed is None:
            smoothed = self.smoother.smooth(ss, panel)
        elif smoothed.T != panel.T or smoothed.q != ss.q:
            raise DimensionError(
                f"Smoother output (T={smoothed.T}, q={smoothed.q}) does not match the panel", MODULE, "decompose"
            )
        return ss, smoothed

    def components(self, ss: StateSpace, smoothed: SmootherOutput) -> np.ndarray:
        """(distinct rows) x T x 3 array of trend, common and idiosyncratic contributions"""
        index = ss.index
        states = smoothed.means[1:]
        blocks = [index.trends, index.psi_lags, index.idio]
        return np.stack([states[:, block] @ ss.B_rows[:, block].T for block in blocks], axis=-1).transpose(1, 0, 2)

    def decompose(self, fitted: FittedModel, panel: PanelDataset,
                  smoothed: Optional[SmootherOutput] = None) -> Decomposition:
        self.logger.info("Decomposing %d rows over T=%d", panel.n_rows, panel.T)
        try:
            ss, smoothed = self._smooth(fitted, panel, smoothed)
            parts = self.components(ss, smoothed)
            names = list(panel.macro_series) + list(panel.row_subjects)
            records = []
            for row in range(panel.n_rows):
                d = ss.row_map[row]
                times = range(1, panel.T + 1) if row < panel.M else [t + 1 for t in np.flatnonzero(panel.mask[row])]
                for t in times:
                    trend, common, idio = parts[d, t - 1]
                    observed = panel.values[row, t - 1] if panel.mask[row, t - 1] else np.nan
                    records.append((names[row], t, observed, trend, common, idio, observed - (trend + common + idio)))
            frame = pd.DataFrame.from_records(records, columns=DECOMPOSITION_COLUMNS)
        except MdfmError:
            raise
        except Exception as e:
            raise NumericalError(f"Error decomposing panel: {str(e)}", MODULE, "decompose") from e
        return Decomposition(frame=frame, smoothed=smoothed)

    def core_driver(self, fitted: FittedModel, group: str, panel: PanelDataset,
                    smoothed: Optional[SmootherOutput] = None) -> pd.Series:
        """Group trend path plus its common-cycle contribution"""
        if group not in fitted.config.groups:
            raise ConfigError(f"Unknown group '{group}'", MODULE, "core_driver")
        ss, smoothed = self._smooth(fitted, panel, smoothed)
        d = ss.config.M + fitted.config.groups.index(group)
        parts = self.components(ss, smoothed)[d]
        return pd.Series(parts[:, 0] + parts[:, 1], index=pd.RangeIndex(1, panel.T + 1, name="time"), name=group)

    def group_summary(self, fitted: FittedModel, panel: PanelDataset,
                      smoothed: Optional[SmootherOutput] = None) -> pd.DataFrame:
        """Mean, quartiles of the observed members, group trend and core driver per group and time"""
        ss, smoothed = self._smooth(fitted, panel, smoothed)
        parts = self.components(ss, smoothed)
        frames = []
        for g, name in enumerate(panel.groups):
            block = pd.DataFrame(panel.values[panel.group_slice(g)].T, index=pd.RangeIndex(1, panel.T + 1, name="time"))
            trend = parts[ss.config.M + g, :, 0]
            frames.append(pd.DataFrame({
                "group": name,
                "time": block.index,
                "mean": block.mean(axis=1, skipna=True).to_numpy(),
                "q25": block.quantile(0.25, axis=1).to_numpy(),
                "q75": block.quantile(0.75, axis=1).to_numpy(),
                "trend": trend,
                "core": trend + parts[ss.config.M + g, :, 1],
            }))
        if not frames:
            return pd.DataFrame(columns=SUMMARY_COLUMNS)
        return pd.concat(frames, ignore_index=True)[SUMMARY_COLUMNS]
