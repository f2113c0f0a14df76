import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import linalg

from ..models.errors import CausalityError, ConfigError
from ..models.schemas import Hyperparameters, ModelConfig, SimulationDesign
from .panel_builder import PanelBuilder, PanelDataset
from .state_space import ParameterVector, StateIndex, StateSpace, StateSpaceBuilder, omega_pattern, spectral_radius

MODULE = "simulate"

# Philox counter slots; draws for different streams or periods never share a counter range
STREAM_INITIAL = 0
STREAM_STATE = 1
STREAM_MEASUREMENT = 2
STREAM_RESPONSE = 3


def keyed_generator(seed: int, stream: int, t: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, t); coordinate k is the k-th draw"""
    return np.random.Generator(np.random.Philox(key=[int(seed), 0], counter=[0, 0, int(t), int(stream)]))


def rotation_mask(design: SimulationDesign, group_sizes: Optional[Sequence[int]] = None) -> np.ndarray:
    """households x T windows of at most `rotation_length` consecutive quarters.

    Entry dates of each group are spread evenly over 2 - L .. T, so windows of
    households entering early or late are cut by the sample edges.
    """
    sizes = list(group_sizes) if group_sizes is not None else list(design.group_sizes)
    T, L = design.periods, design.rotation_length
    starts = T + L - 1
    rows = []
    for size in sizes:
        block = np.zeros((size, T), dtype=bool)
        for h in range(size):
            first = 2 - L + (h * starts) // size
            block[h, max(first, 1) - 1:min(first + L - 1, T)] = True
        rows.append(block)
    return np.vstack(rows) if rows else np.zeros((0, T), dtype=bool)


@dataclass(frozen=True, eq=False)
class SimulationResult:
    """Simulated panel with its true states and the long-form frames it was assembled from"""
    panel: PanelDataset
    states: np.ndarray
    macro: pd.DataFrame
    micro: pd.DataFrame
    config: ModelConfig
    parameters: ParameterVector

    def states_frame(self, names: Sequence[str]) -> pd.DataFrame:
        """Long form time,state,value with time 0 holding the initial state"""
        T, q = self.states.shape
        return pd.DataFrame({
            "time": np.repeat(np.arange(T), q),
            "state": np.tile(list(names), T),
            "value": self.states.reshape(-1),
        })


class Simulator:
    """Draws panels from a known state-space model with rotating household samples"""

    def __init__(self, panel_builder: Optional[PanelBuilder] = None):
        self.logger = logging.getLogger(__name__)
        self.panel_builder = panel_builder or PanelBuilder()
        self.logger.info("Initializing Simulator")

    def _check_causal(self, ss: StateSpace) -> None:
        index = ss.index
        radii = [abs(v) for v in ss.pi[:index.n_idio]] + [spectral_radius(ss.pi[index.n_idio:])]
        if max(radii, default=0.0) >= 1.0:
            raise CausalityError(f"Cannot simulate a non-causal system (radius {max(radii):.4f})", MODULE, "simulate")

    def draw_states(self, ss: StateSpace, periods: int, seed: int) -> np.ndarray:
        """(T+1) x q states; row 0 is Phi_0 ~ N(mu_0, Omega_0)"""
        q = ss.q
        # Omega_0 may be singular (lagged trends), so take a symmetric square root
        values, vectors = linalg.eigh(0.5 * (ss.omega0 + ss.omega0.T))
        root = vectors * np.sqrt(np.clip(values, 0.0, None))
        states = np.zeros((periods + 1, q))
        states[0] = ss.mu0 + root @ keyed_generator(seed, STREAM_INITIAL, 0).standard_normal(q)
        scale = np.sqrt(ss.sigma)
        for t in range(1, periods + 1):
            shocks = scale * keyed_generator(seed, STREAM_STATE, t).standard_normal(ss.r)
            states[t] = ss.C @ states[t - 1] + ss.D @ shocks
        return states

    def simulate(self, ss: StateSpace, design: SimulationDesign, seed: Optional[int] = None) -> SimulationResult:
        """Macro rows observed every period; each household within its rotation window, less random non-response"""
        self._check_causal(ss)
        config = ss.config
        seed = design.seed if seed is None else seed
        T, M = design.periods, config.M
        try:
            sizes = design.resolved_group_sizes(config.G)
        except ValueError as e:
            raise ConfigError(f"Error resolving group sizes: {str(e)}", MODULE, "simulate") from e
        self.logger.info("Simulating T=%d, M=%d, group sizes %s, seed %d", T, M, sizes, seed)

        states = self.draw_states(ss, T, seed)
        windows = rotation_mask(design, sizes)
        group_of = np.repeat(np.arange(config.G), sizes)
        n_households = int(sum(sizes))
        noise_sd = np.sqrt(ss.epsilon)

        macro_records: List[Tuple[int, str, float]] = []
        micro_records: List[Tuple[str, str, int, float]] = []
        keys = [f"{config.groups[g]}-h{h + 1:04d}" for g, size in enumerate(sizes) for h in range(size)]
        for t in range(1, T + 1):
            noise = noise_sd * keyed_generator(seed, STREAM_MEASUREMENT, t).standard_normal(M + n_households)
            signal = ss.B_rows @ states[t]
            for m, name in enumerate(config.macro_series):
                macro_records.append((t, name, float(signal[m] + noise[m])))
            observed = windows[:, t - 1]
            if design.missing_rate > 0:
                observed = observed & (keyed_generator(seed, STREAM_RESPONSE, t).random(n_households) >= design.missing_rate)
            for h in np.flatnonzero(observed):
                g = group_of[h]
                micro_records.append((keys[h], config.groups[g], t, float(signal[M + g] + noise[M + h])))

        macro = pd.DataFrame.from_records(macro_records, columns=["time", "series", "value"])
        micro = pd.DataFrame.from_records(micro_records, columns=["subject_id", "group_id", "time", "value"])
        plain = config.model_copy(update={"macro_transforms": {}, "group_sizes": None})
        panel = self.panel_builder.build(micro, macro, plain, periods=T)
        truth = plain.with_group_sizes(list(panel.group_sizes))
        self.logger.info("Simulated %d macro and %d micro observations", len(macro), len(micro))
        return SimulationResult(
            panel=panel,
            states=states,
            macro=macro,
            micro=micro,
            config=truth,
            parameters=ss.parameters(),
        )


def default_parameters(config: ModelConfig) -> ParameterVector:
    """Causal truth for any configuration: alternating loadings decaying with the lag, persistent cycle"""
    index = StateIndex.from_config(config)
    p = config.p
    signs = np.where(np.arange(config.loading_rows) % 2 == 0, 1.0, -1.0)
    loadings = np.outer(0.8 * signs, 0.5 ** np.arange(p))
    idio = np.where(np.arange(index.n_idio) % 2 == 0, 0.5, 0.3)
    # absolute coefficients sum to 0.8, so the cycle is causal
    cycle = np.array([0.5] + [0.3 / (p - 1)] * (p - 1)) if p > 1 else np.array([0.8])
    sigma = np.concatenate([np.full(index.n_trend, 1e-3), np.full(index.n_idio, 0.1), [0.5]])
    mu0 = np.zeros(index.q)
    mu0[index.trends] = 1.0
    mu0[index.lagged_trends] = 1.0
    omega0 = 0.1 * omega_pattern(index) * np.eye(index.q)
    omega0[index.psi_lags, index.psi_lags] = 0.5 * np.eye(p)
    return ParameterVector(mu0=mu0, omega0=omega0, loadings=loadings, pi=np.concatenate([idio, cycle]), sigma=sigma)


def reference_design(seed: int = 0, periods: int = 120, households: int = 120,
                     hyperparameters: Optional[Hyperparameters] = None) -> Tuple[ModelConfig, ParameterVector, SimulationDesign]:
    """Three macro series, two income groups on two shared income trends, cycle of order two"""
    config = ModelConfig(
        macro_series=["gdp", "employment", "prices"],
        groups=["low", "high"],
        trend_map=[[1, 0], [1, 1]],
        p=2,
        hyperparameters=hyperparameters or Hyperparameters(),
        epsilon=1e-2,
        max_iterations=500,
    )
    index = StateIndex.from_config(config)
    loadings = np.array([
        [0.8, 0.3],
        [-0.6, -0.2],
        [0.9, 0.4],
        [1.2, -0.3],
    ])
    pi = np.array([0.5, 0.3, -0.4, 0.6, 0.4, 0.6, 0.2])
    sigma = np.concatenate([np.full(index.n_trend, 1e-3), np.full(index.n_idio, 0.1), [0.5]])
    mu0 = np.zeros(index.q)
    mu0[index.trends] = np.array([1.0, 0.5, 2.0, 3.0, 0.5])
    mu0[index.lagged_trends] = mu0[index.trends]
    omega0 = 0.1 * omega_pattern(index) * np.eye(index.q)
    omega0[index.psi_lags, index.psi_lags] = 0.5 * np.eye(index.p)
    params = ParameterVector(mu0=mu0, omega0=omega0, loadings=loadings, pi=pi, sigma=sigma)
    design = SimulationDesign(
        periods=periods,
        group_sizes=[households // 2, households - households // 2],
        rotation_length=4,
        seed=seed,
    )
    return config, params, design


def simulate_reference(seed: int = 0, simulator: Optional[Simulator] = None,
                       builder: Optional[StateSpaceBuilder] = None, **kwargs) -> SimulationResult:
    config, params, design = reference_design(seed, **kwargs)
    builder = builder or StateSpaceBuilder()
    sizes = design.resolved_group_sizes(config.G)
    ss = builder.build_state_space(config, params, sizes)
    return (simulator or Simulator()).simulate(ss, design)
