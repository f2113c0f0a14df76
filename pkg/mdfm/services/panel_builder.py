import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ..models.errors import (
    ConfigError,
    ConflictError,
    DimensionError,
    InconsistencyError,
    LayoutError,
    MdfmError,
    NumericalError,
)
from ..models.schemas import ModelConfig, PanelLayout

MODULE = "panel"


class Appearance(NamedTuple):
    """One subject reported at one time"""
    subject: str
    time: int
    characteristics: int = 1
    group: Optional[str] = None


@dataclass
class SubjectRegistry:
    """Identifier function f over (subject, characteristic) pairs plus observed-time sets.

    Identifiers are 1-based and assigned in first-appearance order, so subject s
    (0-based position) owns identifiers s*K + 1 .. s*K + K.
    """
    characteristics: int = 1
    periods: int = 0
    keys: List[str] = field(default_factory=list)
    groups: Dict[str, Optional[str]] = field(default_factory=dict)
    times: Dict[str, set] = field(default_factory=dict)
    _position: Dict[str, int] = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return len(self.keys)

    @property
    def K(self) -> int:
        return self.characteristics

    @property
    def T(self) -> int:
        return self.periods

    def __contains__(self, subject: str) -> bool:
        return subject in self._position

    def index_of(self, subject: str, characteristic: int = 1) -> int:
        if subject not in self._position:
            raise ConfigError(f"Unknown subject '{subject}'", MODULE, "index_of")
        if not 1 <= characteristic <= self.characteristics:
            raise DimensionError(
                f"Characteristic {characteristic} outside 1..{self.characteristics}", MODULE, "index_of"
            )
        return self._position[subject] * self.characteristics + characteristic

    def subject_of(self, index: int) -> Tuple[str, int]:
        if not 1 <= index <= self.N * self.K:
            raise DimensionError(f"Identifier {index} outside 1..{self.N * self.K}", MODULE, "subject_of")
        position, characteristic = divmod(index - 1, self.K)
        return self.keys[position], characteristic + 1

    def observed_times(self, index: int) -> FrozenSet[int]:
        """T_i for identifier i; shared by all K identifiers of a subject"""
        subject, _ = self.subject_of(index)
        return frozenset(self.times[subject])

    def all_times(self) -> FrozenSet[int]:
        out = set()
        for observed in self.times.values():
            out |= observed
        return frozenset(out)

    def copy(self) -> "SubjectRegistry":
        return SubjectRegistry(
            characteristics=self.characteristics,
            periods=self.periods,
            keys=list(self.keys),
            groups=dict(self.groups),
            times={key: set(observed) for key, observed in self.times.items()},
            _position=dict(self._position),
        )

    def _enrol(self, subject: str, group: Optional[str]) -> None:
        self._position[subject] = len(self.keys)
        self.keys.append(subject)
        self.groups[subject] = group
        self.times[subject] = set()

    def _register(self, subject: str, time: int, group: Optional[str]) -> None:
        if subject not in self._position:
            self._enrol(subject, group)
        elif group is not None and self.groups[subject] not in (None, group):
            raise InconsistencyError(
                f"Subject '{subject}' changed group from '{self.groups[subject]}' to '{group}'",
                MODULE, "assign_identifiers",
            )
        elif self.groups[subject] is None:
            self.groups[subject] = group
        self.times[subject].add(time)
        self.periods = max(self.periods, time)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Masked NK-vector time series Y_t with macro rows first and contiguous group blocks.

    `values` is NaN wherever `mask` is False; operations only read masked-in cells.
    Time is 1-based in every public method, columns are 0-based.
    """
    values: np.ndarray
    mask: np.ndarray
    registry: SubjectRegistry
    macro_series: Tuple[str, ...]
    groups: Tuple[str, ...]
    group_sizes: Tuple[int, ...]
    row_subjects: Tuple[str, ...]
    characteristics: int = 1

    @property
    def M(self) -> int:
        return len(self.macro_series)

    @property
    def G(self) -> int:
        return len(self.groups)

    @property
    def T(self) -> int:
        return self.values.shape[1]

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def group_slice(self, g: int) -> slice:
        start = self.M + sum(self.group_sizes[:g]) * self.characteristics
        return slice(start, start + self.group_sizes[g] * self.characteristics)

    def group_of_row(self) -> np.ndarray:
        """Group position for every row, -1 for macro rows"""
        out = np.full(self.n_rows, -1, dtype=int)
        for g in range(self.G):
            out[self.group_slice(g)] = g
        return out

    def row_of(self, subject: str, characteristic: int = 1) -> int:
        position = self.row_subjects.index(subject)
        return self.M + position * self.characteristics + characteristic - 1

    def row_of_series(self, name: str) -> int:
        if name in self.macro_series:
            return self.macro_series.index(name)
        if name in self.row_subjects:
            return self.row_of(name)
        raise ConfigError(f"Unknown series '{name}'", MODULE, "row_of_series")

    def observed_rows(self, t: int) -> np.ndarray:
        """D_t as 0-based row indices in ascending order"""
        return np.flatnonzero(self.mask[:, t - 1])

    def observed_values(self, t: int) -> np.ndarray:
        return self.values[self.observed_rows(t), t - 1]

    def observed_times(self) -> List[int]:
        """T: times with at least one observed row"""
        return [t for t in range(1, self.T + 1) if self.mask[:, t - 1].any()]

    def layout(self) -> PanelLayout:
        subjects = {}
        for g, name in enumerate(self.groups):
            start = sum(self.group_sizes[:g])
            subjects[name] = list(self.row_subjects[start:start + self.group_sizes[g]])
        return PanelLayout(
            macro_series=list(self.macro_series),
            groups=list(self.groups),
            subjects=subjects,
            characteristics=self.characteristics,
            periods=self.T,
        )

    def subject_at_row(self, row: int) -> Optional[str]:
        """Subject owning a row, None for macro rows"""
        if row < self.M:
            return None
        return self.row_subjects[(row - self.M) // self.characteristics]

    def _replace(self, values: np.ndarray, mask: np.ndarray,
                 registry: Optional[SubjectRegistry] = None, **layout) -> "PanelDataset":
        values.setflags(write=False)
        mask.setflags(write=False)
        fields = dict(
            macro_series=self.macro_series,
            groups=self.groups,
            group_sizes=self.group_sizes,
            row_subjects=self.row_subjects,
            characteristics=self.characteristics,
        )
        fields.update(layout)
        return PanelDataset(values=values, mask=mask, registry=registry if registry is not None else self.registry, **fields)

    def restrict(self, sample_end: int) -> "PanelDataset":
        """Information set Y(s): columns 1..s only"""
        if not 1 <= sample_end <= self.T:
            raise DimensionError(f"Sample end {sample_end} outside 1..{self.T}", MODULE, "restrict")
        registry = self.registry.copy()
        for key in registry.keys:
            registry.times[key] = {t for t in registry.times[key] if t <= sample_end}
        return self._replace(self.values[:, :sample_end].copy(), self.mask[:, :sample_end].copy(), registry)

    def with_periods(self, periods: int) -> "PanelDataset":
        """Extend the horizon with fully masked columns"""
        if periods < self.T:
            raise DimensionError(f"Cannot shrink horizon from {self.T} to {periods}", MODULE, "with_periods")
        extra = periods - self.T
        values = np.hstack([self.values, np.full((self.n_rows, extra), np.nan)])
        mask = np.hstack([self.mask, np.zeros((self.n_rows, extra), dtype=bool)])
        registry = self.registry.copy()
        registry.periods = max(registry.periods, periods)
        return self._replace(values, mask, registry)

    def with_cells(self, rows: Sequence[int], times: Sequence[int], values: Sequence[float]) -> "PanelDataset":
        """Observe many cells at once; the owning subjects' registered times follow the mask"""
        rows = np.asarray(rows, dtype=int).reshape(-1)
        times = np.asarray(times, dtype=int).reshape(-1)
        values = np.asarray(values, dtype=float).reshape(-1)
        if not rows.size == times.size == values.size:
            raise DimensionError("Rows, times and values differ in length", MODULE, "with_cells")
        outside = (rows < 0) | (rows >= self.n_rows) | (times < 1) | (times > self.T)
        if outside.any():
            k = int(np.argmax(outside))
            raise DimensionError(
                f"Cell ({rows[k]}, {times[k]}) outside the {self.n_rows} x {self.T} panel", MODULE, "with_cells"
            )
        if not np.all(np.isfinite(values)):
            raise NumericalError("Observed cells must be finite", MODULE, "with_cells")
        new_values = self.values.copy()
        new_mask = self.mask.copy()
        new_values[rows, times - 1] = values
        new_mask[rows, times - 1] = True
        registry = self.registry
        micro = rows >= self.M
        if micro.any():
            registry = registry.copy()
            for row, t in zip(rows[micro], times[micro]):
                registry.times[self.subject_at_row(int(row))].add(int(t))
        return self._replace(new_values, new_mask, registry)

    def with_cell(self, row: int, t: int, value: float) -> "PanelDataset":
        return self.with_cells([row], [t], [value])

    def with_member(self, subject: str, group: str) -> "PanelDataset":
        """Append an unobserved subject at the end of its group's block"""
        if subject in self.row_subjects or subject in self.macro_series:
            raise ConflictError(f"Series '{subject}' is already in the panel", MODULE, "with_member")
        if group not in self.groups:
            raise ConfigError(f"Subject '{subject}' belongs to unknown group '{group}'", MODULE, "with_member")
        g = self.groups.index(group)
        at = self.group_slice(g).stop
        K = self.characteristics
        values = np.insert(self.values, [at] * K, np.nan, axis=0)
        mask = np.insert(self.mask, [at] * K, False, axis=0)
        position = sum(self.group_sizes[:g + 1])
        registry = self.registry.copy()
        registry._enrol(subject, group)
        sizes = list(self.group_sizes)
        sizes[g] += 1
        return self._replace(
            values,
            mask,
            registry,
            group_sizes=tuple(sizes),
            row_subjects=self.row_subjects[:position] + (subject,) + self.row_subjects[position:],
        )

    def without_time(self, t: int) -> "PanelDataset":
        """Mask every row at time t"""
        values = self.values.copy()
        mask = self.mask.copy()
        values[:, t - 1] = np.nan
        mask[:, t - 1] = False
        registry = self.registry.copy()
        for observed in registry.times.values():
            observed.discard(t)
        return self._replace(values, mask, registry)


class PanelBuilder:
    """Service that turns ragged long-form records into a PanelDataset"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.logger.info("Initializing PanelBuilder")

    def vectorise_cross_section(self, H) -> np.ndarray:
        """Stack an N_t x K cross-section subject-major: (H11..H1K, ..., HN1..HNK)'"""
        H = np.asarray(H, dtype=float)
        if H.ndim == 1:
            H = H.reshape(-1, 1)
        if H.ndim != 2 or H.size == 0:
            raise DimensionError(
                f"Cross-section must be a non-empty N_t x K matrix, got shape {H.shape}",
                MODULE, "vectorise_cross_section",
            )
        return H.reshape(-1).copy()

    def assign_identifiers(self, stream: Iterable, periods: Optional[int] = None) -> SubjectRegistry:
        """Assign identifiers incrementally in first-appearance order"""
        registry = SubjectRegistry(characteristics=0)
        for item in stream:
            appearance = item if isinstance(item, Appearance) else Appearance(*item)
            time = int(appearance.time)
            if time < 1 or (periods is not None and time > periods):
                raise DimensionError(
                    f"Time {time} for subject '{appearance.subject}' outside 1..{periods or 'T'}",
                    MODULE, "assign_identifiers",
                )
            if registry.characteristics == 0:
                registry.characteristics = int(appearance.characteristics)
            elif appearance.characteristics != registry.characteristics:
                raise InconsistencyError(
                    f"Subject '{appearance.subject}' reported {appearance.characteristics} characteristics, "
                    f"expected {registry.characteristics}",
                    MODULE, "assign_identifiers",
                )
            registry._register(str(appearance.subject), time, appearance.group)
        registry.characteristics = registry.characteristics or 1
        if periods is not None:
            registry.periods = max(registry.periods, periods)
        self.logger.info("Registered %d subjects with K=%d over T=%d", registry.N, registry.K, registry.T)
        return registry

    def registry_from_frame(self, micro: pd.DataFrame, periods: Optional[int] = None) -> SubjectRegistry:
        """Registry from a long micro frame (subject_id, group_id, time[, characteristic], value)"""
        if micro.empty:
            return self.assign_identifiers([], periods)
        characteristic = micro["characteristic"] if "characteristic" in micro.columns else pd.Series(1, index=micro.index)
        K = int(characteristic.max())
        # first appearance follows time, ties by key, whatever the file order
        micro = micro.assign(subject_id=micro["subject_id"].astype(str), characteristic=characteristic.to_numpy())
        micro = micro.sort_values(["time", "subject_id"], kind="mergesort")
        per_visit = micro.groupby(["subject_id", "time"], sort=False)
        counts = per_visit["characteristic"].nunique()
        stream = []
        for row in micro.drop_duplicates(["subject_id", "time"]).itertuples(index=False):
            reported = int(counts.loc[(row.subject_id, row.time)])
            if reported != K:
                raise InconsistencyError(
                    f"Subject '{row.subject_id}' at time {row.time} reports {reported} of {K} characteristics",
                    MODULE, "assign_identifiers",
                )
            group = str(row.group_id) if "group_id" in micro.columns else None
            stream.append(Appearance(str(row.subject_id), int(row.time), K, group))
        return self.assign_identifiers(stream, periods)

    def apply_macro_transforms(self, macro: pd.DataFrame, transforms: Dict[str, str]) -> pd.DataFrame:
        """Apply per-series transforms; yoy_pct is 100*(x_t / x_{t-4} - 1)"""
        if macro.empty or not transforms:
            return macro
        frames = []
        for name, frame in macro.groupby("series", sort=False):
            frame = frame.sort_values("time")
            if transforms.get(name, "level") == "yoy_pct":
                lagged = frame.set_index("time")["value"].reindex(frame["time"] - 4).to_numpy()
                frame = frame.assign(value=100.0 * (frame["value"].to_numpy() / lagged - 1.0))
                frame = frame[np.isfinite(frame["value"].to_numpy())]
            frames.append(frame)
        self.logger.info("Applied macro transforms to %d series", len(transforms))
        return pd.concat(frames, ignore_index=True)

    def assemble_panel(
        self,
        registry: SubjectRegistry,
        micro: pd.DataFrame,
        macro: pd.DataFrame,
        macro_series: Sequence[str],
        groups: Sequence[str] = (),
        group_sizes: Optional[Sequence[int]] = None,
        within_group_order: str = "first_appearance",
        periods: Optional[int] = None,
    ) -> PanelDataset:
        """Place every observed value in its registry row; mask everything else"""
        self.logger.info("Assembling panel: %d macro series, %d groups, %d subjects", len(macro_series), len(groups), registry.N)
        try:
            macro_series = tuple(str(name) for name in macro_series)
            groups = tuple(str(name) for name in groups)
            K = registry.K
            T = max(
                registry.T,
                int(macro["time"].max()) if not macro.empty else 0,
                periods or 0,
            )
            if T < 1:
                raise DimensionError("Panel has no periods", MODULE, "assemble_panel")

            members: Dict[str, List[str]] = {name: [] for name in groups}
            for key in registry.keys:
                group = registry.groups.get(key)
                if group not in members:
                    raise ConfigError(f"Subject '{key}' belongs to unknown group '{group}'", MODULE, "assemble_panel")
                members[group].append(key)
            if within_group_order == "ascending":
                members = {name: sorted(keys) for name, keys in members.items()}
            sizes = tuple(len(members[name]) for name in groups)
            if group_sizes is not None and tuple(group_sizes) != sizes:
                raise LayoutError(
                    f"Group sizes {sizes} disagree with the configured layout {tuple(group_sizes)}",
                    MODULE, "assemble_panel",
                )
            row_subjects = tuple(key for name in groups for key in members[name])
            M = len(macro_series)
            n_rows = M + len(row_subjects) * K
            values = np.full((n_rows, T), np.nan)
            mask = np.zeros((n_rows, T), dtype=bool)

            self._place_macro(macro, macro_series, values, mask)
            self._place_micro(registry, micro, row_subjects, M, values, mask)

            for position, key in enumerate(row_subjects):
                expected = np.zeros(T, dtype=bool)
                expected[[t - 1 for t in registry.times[key]]] = True
                block = mask[M + position * K:M + (position + 1) * K]
                if not (block == expected).all():
                    raise InconsistencyError(
                        f"Observed cells of subject '{key}' disagree with its registered times", MODULE, "assemble_panel"
                    )

            values.setflags(write=False)
            mask.setflags(write=False)
            panel = PanelDataset(
                values=values,
                mask=mask,
                registry=registry,
                macro_series=macro_series,
                groups=groups,
                group_sizes=sizes,
                row_subjects=row_subjects,
                characteristics=K,
            )
            self.logger.info("Assembled panel with %d rows, T=%d, %d observed cells", n_rows, T, int(mask.sum()))
            return panel
        except MdfmError:
            raise
        except Exception as e:
            raise LayoutError(f"Error assembling panel: {str(e)}", MODULE, "assemble_panel") from e

    def _place_macro(self, macro: pd.DataFrame, macro_series, values: np.ndarray, mask: np.ndarray) -> None:
        if macro.empty:
            return
        unknown = set(macro["series"].astype(str)) - set(macro_series)
        if unknown:
            raise ConfigError(f"Macro input has unknown series: {sorted(unknown)}", MODULE, "assemble_panel")
        for row in macro.itertuples(index=False):
            i, t = macro_series.index(str(row.series)), int(row.time)
            self._place(values, mask, i, t, float(row.value), f"series '{row.series}'")

    def _place_micro(self, registry, micro: pd.DataFrame, row_subjects, M: int, values, mask) -> None:
        if micro.empty:
            return
        K = registry.K
        position = {key: j for j, key in enumerate(row_subjects)}
        characteristic = micro["characteristic"] if "characteristic" in micro.columns else pd.Series(1, index=micro.index)
        frame = micro.assign(characteristic=characteristic)
        for t, cross_section in frame.groupby("time", sort=True):
            t = int(t)
            subjects = list(dict.fromkeys(cross_section["subject_id"].astype(str)))
            H = np.full((len(subjects), K), np.nan)
            for row in cross_section.itertuples(index=False):
                j, c = subjects.index(str(row.subject_id)), int(row.characteristic)
                if not np.isnan(H[j, c - 1]):
                    raise ConflictError(
                        f"Duplicate value for subject '{row.subject_id}' characteristic {c} at time {t}",
                        MODULE, "assemble_panel",
                    )
                H[j, c - 1] = float(row.value)
            stacked = self.vectorise_cross_section(H)
            # W_t placement: entry (j, c) of the stacked vector goes to the subject's registry row
            for j, key in enumerate(subjects):
                if key not in position:
                    raise ConfigError(f"Subject '{key}' is not registered", MODULE, "assemble_panel")
                for c in range(K):
                    row = M + position[key] * K + c
                    self._place(values, mask, row, t, stacked[j * K + c], f"subject '{key}'")

    @staticmethod
    def _place(values: np.ndarray, mask: np.ndarray, row: int, t: int, value: float, what: str) -> None:
        if t < 1 or t > values.shape[1]:
            raise DimensionError(f"Time {t} for {what} outside 1..{values.shape[1]}", MODULE, "assemble_panel")
        if mask[row, t - 1]:
            raise ConflictError(f"Duplicate placement for {what} at time {t}", MODULE, "assemble_panel")
        if not np.isfinite(value):
            raise NumericalError(f"Non-finite value for {what} at time {t}", MODULE, "assemble_panel", time=t)
        values[row, t - 1] = value
        mask[row, t - 1] = True

    def build(self, micro: pd.DataFrame, macro: pd.DataFrame, config: ModelConfig,
              periods: Optional[int] = None) -> PanelDataset:
        """Registry plus assembly for a model configuration"""
        macro = self.apply_macro_transforms(macro, dict(config.macro_transforms))
        registry = self.registry_from_frame(micro, periods)
        return self.assemble_panel(
            registry,
            micro,
            macro,
            config.macro_series,
            config.groups,
            group_sizes=config.group_sizes,
            within_group_order=config.within_group_order,
            periods=periods,
        )

    def from_matrix(self, values, mask=None, names: Optional[Sequence[str]] = None) -> PanelDataset:
        """Panel of aggregate rows only, from an n x T matrix; NaN cells are missing unless a mask is given"""
        values = np.array(values, dtype=float, ndmin=2)
        mask = np.isfinite(values) if mask is None else np.array(mask, dtype=bool)
        if mask.shape != values.shape:
            raise DimensionError(f"Mask shape {mask.shape} differs from values {values.shape}", MODULE, "from_matrix")
        if np.any(mask & ~np.isfinite(values)):
            raise NumericalError("Observed cells must be finite", MODULE, "from_matrix")
        values = np.where(mask, values, np.nan)
        names = tuple(names) if names is not None else tuple(f"y{i + 1}" for i in range(values.shape[0]))
        if len(names) != values.shape[0]:
            raise DimensionError(f"{len(names)} names for {values.shape[0]} rows", MODULE, "from_matrix")
        values.setflags(write=False)
        mask.setflags(write=False)
        return PanelDataset(
            values=values,
            mask=mask,
            registry=SubjectRegistry(characteristics=1, periods=values.shape[1]),
            macro_series=names,
            groups=(),
            group_sizes=(),
            row_subjects=(),
        )

    def from_layout(self, layout: PanelLayout, periods: Optional[int] = None) -> PanelDataset:
        """Empty panel with the row layout of a fitted model"""
        stream = []
        for group in layout.groups:
            for key in layout.subjects.get(group, []):
                stream.append(Appearance(key, 1, layout.characteristics, group))
        registry = self.assign_identifiers(stream, periods or layout.periods)
        for key in registry.keys:
            registry.times[key] = set()
        T = max(periods or 0, layout.periods)
        micro_rows = sum(len(layout.subjects.get(group, [])) for group in layout.groups) * layout.characteristics
        n_rows = len(layout.macro_series) + micro_rows
        values = np.full((n_rows, T), np.nan)
        mask = np.zeros((n_rows, T), dtype=bool)
        values.setflags(write=False)
        mask.setflags(write=False)
        return PanelDataset(
            values=values,
            mask=mask,
            registry=registry,
            macro_series=tuple(layout.macro_series),
            groups=tuple(layout.groups),
            group_sizes=tuple(len(layout.subjects.get(group, [])) for group in layout.groups),
            row_subjects=tuple(key for group in layout.groups for key in layout.subjects.get(group, [])),
            characteristics=layout.characteristics,
        )
