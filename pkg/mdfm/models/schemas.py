from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Optional, Dict, Any, Literal

US_MACRO_SERIES = ["GDPC1", "PCECC96", "GPDIC1", "PAYEMS", "EMRATIO", "UNRATE", "WTISPLC", "PCEPI"]
HOUSEHOLD_GROUPS = ["0-0", "0-1", "1-0", "1-1"]
# shared income trends: {9}, {10}, {9, 11}, {10, 11} once the 8 macro trends come first
HOUSEHOLD_TREND_MAP = [[1, 0, 0], [0, 1, 0], [1, 0, 1], [0, 1, 1]]

MacroTransform = Literal["level", "yoy_pct"]


class Hyperparameters(BaseModel):
    """Elastic-net hyperparameters gamma = (rho, alpha, beta)"""
    rho: float = Field(default=2.573, ge=0, description="Overall penalty scale")
    alpha: float = Field(default=0.667, ge=0, le=1, description="Share of the l1 part of the elastic net")
    beta: float = Field(default=1.326, ge=1, description="Geometric growth of the penalty across lags")

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={"example": {"rho": 2.573, "alpha": 0.667, "beta": 1.326}},
    )


class ModelConfig(BaseModel):
    """Dimensions, group layout, trend sharing and estimation settings of the model"""
    macro_series: List[str] = Field(..., min_length=1, description="Macro series names; their order fixes rows 1..M")
    groups: List[str] = Field(default=[], description="Group identifiers in block order")
    trend_map: List[List[int]] = Field(default=[], description="G x n_income_trends 0/1 matrix of summed trends per group")
    p: int = Field(default=4, ge=1, description="Lag order of the common cycle")
    hyperparameters: Hyperparameters = Field(default_factory=Hyperparameters)
    epsilon: float = Field(default=1e-2, gt=0, description="Measurement noise variance, R = epsilon * I")
    max_iterations: int = Field(default=1000, ge=0, description="ECM iteration cap")
    tolerance_median: float = Field(default=1e-3, gt=0, description="Tolerance on the median relative change")
    tolerance_q95: float = Field(default=1e-2, gt=0, description="Tolerance on the 95th quantile relative change")
    tolerance_objective: float = Field(
        default=1e-6, ge=0, description="Largest relative objective gain of the last iteration that still allows stopping"
    )
    causality_limit: float = Field(default=0.98, gt=0, lt=1, description="Largest admitted companion spectral radius")
    initial_state_variance: float = Field(default=1.0, gt=0, description="Scale of the starting Omega_0")
    within_group_order: Literal["first_appearance", "ascending"] = Field(default="first_appearance")
    macro_transforms: Dict[str, MacroTransform] = Field(default={}, description="Per-series transform, level when absent")
    characteristics: int = Field(default=1, ge=1, description="Characteristics per subject (K)")
    group_sizes: Optional[List[int]] = Field(default=None, description="Subjects per group (omega), filled from the panel")

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={
            "example": {
                "macro_series": ["GDP", "UNRATE", "PCEPI"],
                "groups": ["low", "high"],
                "trend_map": [[1, 0], [1, 1]],
                "p": 2,
                "hyperparameters": {"rho": 0.0, "alpha": 0.5, "beta": 1.0},
                "epsilon": 0.01,
                "max_iterations": 500,
            }
        },
    )

    @field_validator("macro_series", "groups")
    @classmethod
    def _unique_names(cls, names: List[str]) -> List[str]:
        if len(set(names)) != len(names):
            raise ValueError(f"Names must be unique, got {names}")
        return names

    @model_validator(mode="after")
    def _check_layout(self) -> "ModelConfig":
        if len(self.trend_map) != len(self.groups):
            raise ValueError(f"trend_map needs one row per group: {len(self.trend_map)} rows for {len(self.groups)} groups")
        widths = {len(row) for row in self.trend_map}
        if len(widths) > 1:
            raise ValueError("trend_map rows must share the same length")
        for row in self.trend_map:
            if any(v not in (0, 1) for v in row):
                raise ValueError(f"trend_map entries must be 0 or 1, got {row}")
            if not any(row):
                raise ValueError("every trend_map row must assign at least one trend")
        unknown = set(self.macro_transforms) - set(self.macro_series)
        if unknown:
            raise ValueError(f"Transforms given for unknown series: {sorted(unknown)}")
        if self.group_sizes is not None:
            if len(self.group_sizes) != len(self.groups):
                raise ValueError("group_sizes needs one entry per group")
            if any(size < 0 for size in self.group_sizes):
                raise ValueError("group_sizes must be non-negative")
        return self

    @property
    def M(self) -> int:
        return len(self.macro_series)

    @property
    def G(self) -> int:
        return len(self.groups)

    @property
    def n_income_trends(self) -> int:
        return len(self.trend_map[0]) if self.trend_map else 0

    @property
    def trend_count(self) -> int:
        return self.M + self.n_income_trends

    @property
    def idio_count(self) -> int:
        return self.M + self.G

    @property
    def loading_rows(self) -> int:
        """Rows of Lambda: every macro series but the first, plus one per group"""
        return self.M - 1 + self.G

    def with_group_sizes(self, sizes: List[int]) -> "ModelConfig":
        return self.model_validate({**self.model_dump(), "group_sizes": list(sizes)})

    @classmethod
    def household_default(cls) -> "ModelConfig":
        return cls(
            macro_series=list(US_MACRO_SERIES),
            groups=list(HOUSEHOLD_GROUPS),
            trend_map=[list(row) for row in HOUSEHOLD_TREND_MAP],
            p=4,
            macro_transforms={"WTISPLC": "yoy_pct", "PCEPI": "yoy_pct"},
        )


class SimulationDesign(BaseModel):
    """Synthetic panel design with survey-style household rotation"""
    periods: int = Field(..., ge=1, description="Number of quarters T")
    group_sizes: List[int] = Field(default=[], description="Households per group across all periods")
    households_per_quarter: Optional[int] = Field(default=None, ge=1, description="When set, overrides group_sizes")
    rotation_length: int = Field(default=4, ge=1, description="Maximum consecutive quarters per household")
    missing_rate: float = Field(default=0.0, ge=0, lt=1, description="Extra random non-response inside windows")
    seed: int = Field(default=0, ge=0)

    model_config = ConfigDict(
        frozen=True,
        json_schema_extra={"example": {"periods": 120, "group_sizes": [60, 60], "rotation_length": 4, "seed": 7}},
    )

    def resolved_group_sizes(self, n_groups: int) -> List[int]:
        if self.households_per_quarter is None:
            if len(self.group_sizes) != n_groups:
                raise ValueError(f"Design lists {len(self.group_sizes)} group sizes for {n_groups} groups")
            return list(self.group_sizes)
        # entries are staggered over periods + rotation_length - 1 start dates
        starts = self.periods + self.rotation_length - 1
        size = -(-self.households_per_quarter * starts // self.rotation_length)
        return [size] * n_groups


class TraceRow(BaseModel):
    iteration: int
    objective: float
    median_delta: Optional[float] = Field(default=None, description="Empty for the starting values")
    q95_delta: Optional[float] = None


class PanelLayout(BaseModel):
    """Row layout of a panel, enough to rebuild an empty information set"""
    macro_series: List[str]
    groups: List[str]
    subjects: Dict[str, List[str]] = Field(default={}, description="Subject keys per group in row order")
    characteristics: int = 1
    periods: int


class FittedModelRecord(BaseModel):
    """Versioned on-disk form of a fitted model"""
    format_version: int = 1
    config: ModelConfig
    parameters: List[float]
    parameter_names: List[str] = Field(default=[])
    trace: List[TraceRow] = Field(default=[])
    converged: bool = False
    iterations: int = 0
    max_iterations_reached: bool = False
    sample_end: Optional[int] = None
    layout: PanelLayout

    @field_validator("format_version")
    @classmethod
    def _supported_version(cls, version: int) -> int:
        if version != 1:
            raise ValueError(f"Unsupported fitted model format version {version}")
        return version


class RunConfig(BaseModel):
    """Arguments of one batch run"""
    subcommand: Literal["simulate", "estimate", "decompose", "nowcast"]
    config_path: Optional[str] = None
    design_path: Optional[str] = None
    model_path: Optional[str] = None
    macro_path: Optional[str] = None
    micro_path: Optional[str] = None
    calendar_path: Optional[str] = None
    output_dir: str
    seed: Optional[int] = None
    max_iterations: Optional[int] = Field(default=None, ge=0)
    sample_end: Optional[int] = Field(default=None, ge=1)
    targets: List[int] = Field(default=[])
    core_only: bool = False

    @model_validator(mode="after")
    def _required_inputs(self) -> "RunConfig":
        required = {
            "simulate": ["config_path"],
            "estimate": ["config_path", "macro_path"],
            "decompose": ["model_path", "macro_path"],
            "nowcast": ["model_path", "calendar_path"],
        }[self.subcommand]
        missing = [name for name in required if getattr(self, name) is None]
        if missing:
            raise ValueError(f"{self.subcommand} requires {', '.join(missing)}")
        return self

    def input_paths(self) -> List[str]:
        names = ["config_path", "design_path", "model_path", "macro_path", "micro_path", "calendar_path"]
        return [getattr(self, name) for name in names if getattr(self, name) is not None]


class SimulateRequest(BaseModel):
    """Request body for synthetic panel generation"""
    design: SimulationDesign
    config: ModelConfig

    model_config = ConfigDict(
        json_schema_extra={
            "example": {
                "design": {"periods": 40, "group_sizes": [20, 20], "rotation_length": 4, "seed": 7},
                "config": ModelConfig.model_config["json_schema_extra"]["example"],
            }
        }
    )


class SimulateResponse(BaseModel):
    macro_csv: str = Field(..., description="Macro panel in time,series,value form")
    micro_csv: str = Field(..., description="Micro panel in subject_id,group_id,time,value form")
    truth: FittedModelRecord


class EstimateResponse(BaseModel):
    """Summary of one estimation run"""
    model_id: str = Field(..., description="Content hash of the fitted parameter vector")
    converged: bool
    iterations: int
    objective: Optional[float] = Field(default=None, description="Last penalized quasi log-likelihood")
    trace: List[TraceRow] = Field(default=[])

    model_config = ConfigDict(
        protected_namespaces=(),
        json_schema_extra={
            "example": {"model_id": "3f2a9c", "converged": True, "iterations": 87, "objective": -412.5, "trace": []}
        },
    )


class DecompositionResponse(BaseModel):
    rows: List[Dict[str, Any]] = Field(default=[], description="entity,time,observed,trend,common,idio,residual")
    group_summary: List[Dict[str, Any]] = Field(default=[])


class EarlyEstimate(BaseModel):
    release_date: int
    group: str
    ref_period: int
    estimate: float


class NowcastResponse(BaseModel):
    estimates: List[EarlyEstimate] = Field(default=[])
    core_only: bool = False


class HealthResponse(BaseModel):
    """Response model for health check"""
    status: str = Field(..., description="Overall health status")
    models_loaded: int = Field(default=0, description="Fitted models held in memory")

    model_config = ConfigDict(
        protected_namespaces=(),
        json_schema_extra={"example": {"status": "healthy", "models_loaded": 1}},
    )
