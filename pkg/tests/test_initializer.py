import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose

from mdfm.models.errors import LayoutError
from mdfm.models.schemas import ModelConfig, SimulationDesign
from mdfm.services.initializer import HP_LAMBDA_QUARTERLY, ParameterInitializer
from mdfm.services.panel_builder import PanelBuilder
from mdfm.services.simulator import Simulator, default_parameters, simulate_reference
from mdfm.services.state_space import StateIndex, StateSpaceBuilder


@pytest.fixture
def initializer():
    return ParameterInitializer()


@pytest.fixture(scope="module")
def household_simulation():
    """Household configuration with 40 households per group over 120 quarters"""
    config = ModelConfig.household_default()
    design = SimulationDesign(periods=120, group_sizes=[40] * 4, rotation_length=4, seed=21)
    ss = StateSpaceBuilder().build_state_space(config, default_parameters(config), design.group_sizes)
    return Simulator().simulate(ss, design)


def test_group_means_skip_unobserved_times(initializer):
    micro = pd.DataFrame.from_records(
        [("a", "g", 1, 2.0), ("b", "g", 1, 4.0), ("a", "g", 2, 5.0)],
        columns=["subject_id", "group_id", "time", "value"],
    )
    macro = pd.DataFrame({"time": [1, 2, 3], "series": ["x"] * 3, "value": [0.0, 0.0, 0.0]})
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1)
    panel = PanelBuilder().build(micro, macro, config)
    means = initializer.group_means(panel)
    assert means["g"].iloc[0] == 3.0
    assert means["g"].iloc[1] == 5.0
    assert np.isnan(means["g"].iloc[2])


def test_group_without_observations(initializer):
    macro = pd.DataFrame({"time": [1, 2], "series": ["x", "x"], "value": [0.0, 1.0]})
    empty = pd.DataFrame(columns=["subject_id", "group_id", "time", "value"])
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1)
    panel = PanelBuilder().build(empty, macro, config)
    assert panel.group_sizes == (0,)
    with pytest.raises(LayoutError):
        initializer.group_means(panel)


def test_linear_trends_pass_through(initializer):
    t = np.arange(1.0, 41.0)
    frame = pd.DataFrame({"a": 2.0 + 0.5 * t, "b": -t})
    assert_allclose(initializer.detrend(frame).to_numpy(), frame.to_numpy(), atol=1e-8)


def test_gaps_are_bridged_before_filtering(initializer):
    t = np.arange(1.0, 31.0)
    series = 1.0 + 0.2 * t
    holed = series.copy()
    holed[[10, 11, 20]] = np.nan
    trend = initializer.detrend(pd.DataFrame({"x": holed}))
    assert_allclose(trend["x"].to_numpy(), series, atol=1e-6)
    holed[[0, 29]] = np.nan
    assert initializer.detrend(pd.DataFrame({"x": holed}))["x"].notna().all()


def test_initial_cycle_tracks_the_household_cycle(initializer, household_simulation):
    simulation = household_simulation
    psi = initializer.initial_cycle(simulation.panel, simulation.config)
    position = StateIndex.from_config(simulation.config).psi
    truth = simulation.states[1:, position]
    assert psi.shape == truth.shape
    assert np.corrcoef(psi, truth)[0, 1] > 0.8


def test_initial_cycle_tracks_the_reference_cycle(initializer):
    simulation = simulate_reference(seed=4)
    position = StateIndex.from_config(simulation.config).psi
    psi = initializer.initial_cycle(simulation.panel, simulation.config)
    assert np.corrcoef(psi, simulation.states[1:, position])[0, 1] > 0.8


def test_trend_variances_follow_the_smoothing_ratio(initializer, household_simulation):
    simulation = household_simulation
    config = simulation.config
    start = initializer.initialize(simulation.panel, config)
    M = config.M
    macro = pd.DataFrame(simulation.panel.values[:M].T)
    cycle = macro - initializer.detrend(macro)
    assert_allclose(start.sigma[:M], np.maximum(cycle.var(ddof=0).to_numpy() / HP_LAMBDA_QUARTERLY, 1e-6))
    assert np.all(start.sigma[:config.trend_count] > 0)


def test_initialization_is_deterministic(initializer, household_simulation):
    simulation = household_simulation
    first = initializer.initialize(simulation.panel, simulation.config)
    again = ParameterInitializer().initialize(simulation.panel, simulation.config)
    assert np.array_equal(first.pack(), again.pack())
