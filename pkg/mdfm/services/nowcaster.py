import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..models.errors import ConfigError, ConflictError, HorizonError, InconsistencyError, MdfmError, NumericalError
from ..models.schemas import EarlyEstimate
from .ecm_estimator import FittedModel
from .kalman_smoother import KalmanSmoother
from .panel_builder import PanelBuilder, PanelDataset

MODULE = "nowcast"

CALENDAR_COLUMNS = ["release_date", "series", "ref_period", "value"]


class Release(NamedTuple):
    """One published value: a macro series or a household, at a reference period.

    `group` names the household's group; it lets a household outside the fitted layout join its group.
    """
    release_date: int
    series: str
    ref_period: int
    value: float
    group: Optional[str] = None


@dataclass(frozen=True, eq=False)
class InformationSet:
    """Values released so far on the fixed row layout of a fitted model"""
    panel: PanelDataset
    release_date: Optional[int] = None
    applied: int = 0

    @property
    def horizon(self) -> int:
        return self.panel.T


def read_calendar(frame: pd.DataFrame) -> List[Release]:
    """Releases in file order; rows without a value are kept as no-ops. An optional group_id column tags households"""
    missing = [name for name in CALENDAR_COLUMNS if name not in frame.columns]
    if missing:
        raise ConfigError(f"Calendar is missing columns {missing}", MODULE, "read_calendar")
    has_group = "group_id" in frame.columns
    releases = []
    for row in frame.itertuples(index=False):
        value = float(row.value) if pd.notna(row.value) else float("nan")
        group = str(row.group_id) if has_group and pd.notna(row.group_id) else None
        releases.append(Release(int(row.release_date), str(row.series), int(row.ref_period), value, group))
    return releases


class Nowcaster:
    """Replays a release calendar against frozen coefficients"""

    def __init__(self, smoother: Optional[KalmanSmoother] = None, panel_builder: Optional[PanelBuilder] = None):
        self.logger = logging.getLogger(__name__)
        self.smoother = smoother or KalmanSmoother()
        self.panel_builder = panel_builder or PanelBuilder()
        self.logger.info("Initializing Nowcaster")

    def empty_information_set(self, fitted: FittedModel, horizon: Optional[int] = None) -> InformationSet:
        return InformationSet(panel=self.panel_builder.from_layout(fitted.layout, horizon))

    def base_information_set(self, fitted: FittedModel, macro: pd.DataFrame, micro: pd.DataFrame,
                             horizon: Optional[int] = None) -> InformationSet:
        """Data known before the first release, placed on the fitted row layout.

        Fitted households absent from the base stay unobserved; households the fit never saw
        join the end of their group's block.
        """
        macro = self.panel_builder.apply_macro_transforms(macro, dict(fitted.config.macro_transforms))
        cells = [Release(0, str(row.series), int(row.time), float(row.value)) for row in macro.itertuples(index=False)]
        cells += [
            Release(0, str(row.subject_id), int(row.time), float(row.value), str(row.group_id))
            for row in micro.itertuples(index=False)
        ]
        periods = max([horizon or 0, fitted.layout.periods] + [cell.ref_period for cell in cells])
        panel = self.panel_builder.from_layout(fitted.layout, periods)
        self.logger.info("Building base information set from %d cells over T=%d", len(cells), periods)

        # unseen households join in first-appearance order, whatever the file order
        for cell in sorted(cells, key=lambda cell: (cell.ref_period, cell.series)):
            panel = self._enrol(panel, cell, "base_information_set")

        placed: Dict[Tuple[str, int], float] = {}
        for cell in cells:
            if cell.ref_period < 1:
                raise HorizonError(f"Reference period {cell.ref_period} outside 1..{periods}", MODULE, "base_information_set")
            if not np.isfinite(cell.value):
                raise NumericalError(
                    f"Non-finite base value for '{cell.series}' at period {cell.ref_period}", MODULE, "base_information_set"
                )
            key = (cell.series, cell.ref_period)
            if key in placed and placed[key] != cell.value:
                raise ConflictError(
                    f"Conflicting base values for '{cell.series}' at period {cell.ref_period}: "
                    f"{placed[key]!r} then {cell.value!r}",
                    MODULE, "base_information_set",
                )
            placed[key] = cell.value
        panel = panel.with_cells(
            [panel.row_of_series(series) for series, _ in placed],
            [t for _, t in placed],
            list(placed.values()),
        )
        added = panel.n_rows - len(fitted.layout.macro_series) - sum(len(v) for v in fitted.layout.subjects.values())
        if added:
            self.logger.info("Base information set added %d households outside the fitted layout", added)
        return InformationSet(panel=panel, applied=len(placed))

    def _enrol(self, panel: PanelDataset, release: Release, operation: str) -> PanelDataset:
        """Resolve the release's row, adding a household that carries a group"""
        if release.series in panel.macro_series:
            return panel
        if release.series in panel.row_subjects:
            registered = panel.registry.groups.get(release.series)
            if release.group is not None and registered is not None and registered != release.group:
                raise InconsistencyError(
                    f"Household '{release.series}' belongs to '{registered}', not '{release.group}'", MODULE, operation
                )
            return panel
        if release.group is None:
            raise ConfigError(f"Release for unknown series '{release.series}'", MODULE, operation)
        return panel.with_member(release.series, release.group)

    def apply_release(self, info: InformationSet, release: Release) -> InformationSet:
        """Add one cell; an identical repeat is a no-op, a different value for a filled cell conflicts"""
        if release.ref_period < 1 or release.ref_period > info.horizon:
            raise HorizonError(
                f"Reference period {release.ref_period} outside 1..{info.horizon}", MODULE, "apply_release"
            )
        if not np.isfinite(release.value):
            return InformationSet(panel=info.panel, release_date=release.release_date, applied=info.applied)
        panel = self._enrol(info.panel, release, "apply_release")
        row = panel.row_of_series(release.series)
        t = release.ref_period
        if panel.mask[row, t - 1]:
            current = panel.values[row, t - 1]
            if current != release.value:
                raise ConflictError(
                    f"Conflicting release for '{release.series}' at period {t}: {current!r} then {release.value!r}",
                    MODULE, "apply_release",
                )
            return InformationSet(panel=panel, release_date=release.release_date, applied=info.applied)
        return InformationSet(
            panel=panel.with_cell(row, t, release.value),
            release_date=release.release_date,
            applied=info.applied + 1,
        )

    def apply_batch(self, info: InformationSet, releases: Iterable[Release]) -> InformationSet:
        """Releases sharing a date, in a canonical order so the result does not depend on file order"""
        for release in sorted(releases, key=lambda rel: (rel.series, rel.ref_period, rel.value, rel.group or "")):
            info = self.apply_release(info, release)
        return info

    def early_estimates(self, fitted: FittedModel, info: InformationSet, targets: Sequence[int],
                        core_only: bool = False) -> List[EarlyEstimate]:
        """Smoothed group signal (core driver plus idiosyncratic cycle, or core only) at each target period"""
        targets = sorted(set(int(t) for t in targets))
        beyond = [t for t in targets if t < 1 or t > info.horizon]
        if beyond:
            raise HorizonError(f"Target periods {beyond} outside 1..{info.horizon}", MODULE, "early_estimates")
        panel = info.panel
        try:
            ss = self.smoother.builder.build_state_space(fitted.config, fitted.parameters, panel.group_sizes)
            smoothed = self.smoother.smooth(ss, panel)
        except MdfmError:
            raise
        except Exception as e:
            raise NumericalError(f"Error smoothing information set: {str(e)}", MODULE, "early_estimates") from e

        rows = ss.B_rows[ss.config.M:].copy()
        if core_only:
            rows[:, ss.index.idio] = 0.0
        release_date = info.release_date if info.release_date is not None else 0
        estimates = []
        for g, group in enumerate(panel.groups):
            for t in targets:
                estimates.append(EarlyEstimate(
                    release_date=release_date,
                    group=group,
                    ref_period=t,
                    estimate=float(rows[g] @ smoothed.means[t]),
                ))
        return estimates

    def replay(self, fitted: FittedModel, releases: Sequence[Release], targets: Optional[Sequence[int]] = None,
               core_only: bool = False, base: Optional[InformationSet] = None) -> List[Tuple[int, List[EarlyEstimate]]]:
        """One batch of estimates per release date, re-smoothing after each date's releases"""
        model_id = fitted.model_id
        if targets is None:
            targets = sorted({release.ref_period for release in releases})
        horizon = max([fitted.layout.periods] + [release.ref_period for release in releases] + list(targets))
        info = base if base is not None else self.empty_information_set(fitted, horizon)
        if info.horizon < horizon:
            info = InformationSet(panel=info.panel.with_periods(horizon), release_date=info.release_date, applied=info.applied)

        by_date: Dict[int, List[Release]] = {}
        for release in releases:
            by_date.setdefault(release.release_date, []).append(release)
        self.logger.info("Replaying %d releases over %d release dates", len(releases), len(by_date))

        batches = []
        for date in sorted(by_date):
            info = self.apply_batch(info, by_date[date])
            info = InformationSet(panel=info.panel, release_date=date, applied=info.applied)
            estimates = self.early_estimates(fitted, info, targets, core_only=core_only)
            self.logger.debug("Release date %d: %d cells observed", date, int(info.panel.mask.sum()))
            batches.append((date, estimates))
        if fitted.model_id != model_id:
            raise NumericalError("Fitted coefficients changed during replay", MODULE, "replay")
        return batches
