import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from mdfm.models.errors import ConfigError, ConflictError, DimensionError, InconsistencyError, LayoutError
from mdfm.models.schemas import ModelConfig
from mdfm.services.panel_builder import Appearance, PanelBuilder


@pytest.fixture
def panel_builder():
    return PanelBuilder()


@pytest.mark.parametrize(("H", "expected"), [
    ([[1, 2], [3, 4]], [1, 2, 3, 4]),
    ([[5], [6]], [5, 6]),
    ([[7, 8, 9]], [7, 8, 9]),
])
def test_vectorise_cross_section(panel_builder, H, expected):
    assert_allclose(panel_builder.vectorise_cross_section(H), expected)


def test_vectorise_rejects_empty(panel_builder):
    with pytest.raises(DimensionError):
        panel_builder.vectorise_cross_section(np.zeros((0, 2)))


def test_identifiers_in_first_appearance_order(panel_builder):
    stream = [Appearance("A", 1, 2), Appearance("B", 2, 2), Appearance("A", 3, 2)]
    registry = panel_builder.assign_identifiers(stream)
    assert registry.N == 2 and registry.K == 2
    assert [registry.index_of("A", 1), registry.index_of("A", 2)] == [1, 2]
    assert [registry.index_of("B", 1), registry.index_of("B", 2)] == [3, 4]
    assert registry.observed_times(1) == registry.observed_times(2) == frozenset({1, 3})
    assert registry.observed_times(3) == registry.observed_times(4) == frozenset({2})
    assert registry.all_times() == frozenset({1, 2, 3})
    assert registry.subject_of(4) == ("B", 2)


def test_single_subject_every_period(panel_builder):
    registry = panel_builder.assign_identifiers([("only", t) for t in range(1, 6)])
    assert registry.N == 1
    assert registry.observed_times(1) == frozenset(range(1, 6))


def test_empty_stream(panel_builder):
    registry = panel_builder.assign_identifiers([])
    assert registry.N == 0


def test_changed_characteristic_count(panel_builder):
    with pytest.raises(InconsistencyError):
        panel_builder.assign_identifiers([Appearance("A", 1, 2), Appearance("A", 2, 3)])


def test_changed_group(panel_builder):
    with pytest.raises(InconsistencyError):
        panel_builder.assign_identifiers([Appearance("A", 1, 1, "low"), Appearance("A", 2, 1, "high")])


def _micro(records):
    return pd.DataFrame.from_records(records, columns=["subject_id", "group_id", "time", "value"])


def _macro(records):
    return pd.DataFrame.from_records(records, columns=["time", "series", "value"])


def test_mask_follows_observed_times(panel_builder):
    micro = _micro([("h1", "g", 1, 1.5), ("h1", "g", 3, 2.5)])
    macro = _macro([(t, "x", float(t)) for t in range(1, 4)])
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1)
    panel = panel_builder.build(micro, macro, config)
    assert panel.mask[1].tolist() == [True, False, True]
    assert np.isnan(panel.values[1, 1])
    assert panel.observed_rows(2).tolist() == [0]


def test_zero_values_are_observed(panel_builder):
    macro = _macro([(1, "x", 0.0), (3, "x", 0.0)])
    panel = panel_builder.build(_micro([]), macro, ModelConfig(macro_series=["x"], p=1))
    assert panel.mask[0].tolist() == [True, False, True]
    assert panel.values[0, 0] == 0.0


def test_group_blocks_follow_macro_rows(panel_builder):
    micro = _micro([("c", "g2", 1, 3.0), ("a", "g1", 1, 1.0), ("b", "g1", 2, 2.0)])
    macro = _macro([(1, "x", 0.1), (2, "x", 0.2)])
    config = ModelConfig(macro_series=["x"], groups=["g1", "g2"], trend_map=[[1], [1]], p=1, group_sizes=[2, 1])
    panel = panel_builder.build(micro, macro, config)
    assert panel.row_subjects == ("a", "b", "c")
    assert panel.group_sizes == (2, 1)
    assert panel.group_of_row().tolist() == [-1, 0, 0, 1]
    assert panel.group_slice(1) == slice(3, 4)


def test_ascending_order_within_groups(panel_builder):
    micro = _micro([("z", "g", 1, 1.0), ("a", "g", 1, 2.0)])
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1, within_group_order="ascending")
    panel = panel_builder.build(micro, _macro([(1, "x", 0.0)]), config)
    assert panel.row_subjects == ("a", "z")
    assert panel.values[1, 0] == 2.0


def test_group_sizes_must_match(panel_builder):
    micro = _micro([("a", "g", 1, 1.0)])
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1, group_sizes=[2])
    with pytest.raises(LayoutError):
        panel_builder.build(micro, _macro([(1, "x", 0.0)]), config)


def test_duplicate_cell_conflicts(panel_builder):
    macro = _macro([(1, "x", 1.0), (1, "x", 2.0)])
    with pytest.raises(ConflictError):
        panel_builder.build(_micro([]), macro, ModelConfig(macro_series=["x"], p=1))


def test_yoy_transform(panel_builder):
    macro = _macro([(t, "cpi", 100.0 * 1.02 ** (t - 1)) for t in range(1, 10)])
    config = ModelConfig(macro_series=["cpi"], p=1, macro_transforms={"cpi": "yoy_pct"})
    panel = panel_builder.build(_micro([]), macro, config)
    assert panel.mask[0].tolist() == [False] * 4 + [True] * 5
    assert_allclose(panel.values[0, 4:], 100.0 * (1.02 ** 4 - 1.0))


def test_layout_round_trip(panel_builder):
    micro = _micro([("a", "g1", 1, 1.0), ("b", "g2", 2, 2.0)])
    config = ModelConfig(macro_series=["x"], groups=["g1", "g2"], trend_map=[[1], [1]], p=1)
    panel = panel_builder.build(micro, _macro([(1, "x", 0.0)]), config)
    empty = panel_builder.from_layout(panel.layout(), periods=5)
    assert empty.row_subjects == panel.row_subjects
    assert empty.T == 5
    assert not empty.mask.any()


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 32 - 1))
def test_masked_cells_never_read(seed):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(3, 5))
    mask = rng.random((3, 5)) < 0.5
    builder = PanelBuilder()
    a = builder.from_matrix(values, mask)
    b = builder.from_matrix(np.where(mask, values, rng.normal(size=(3, 5)) * 1e6), mask)
    assert np.array_equal(a.mask, b.mask)
    assert np.array_equal(a.values[a.mask], b.values[b.mask])
    assert np.isnan(a.values[~a.mask]).all()


def test_restrict_and_extend(panel_builder):
    panel = panel_builder.from_matrix(np.arange(6.0).reshape(2, 3))
    assert panel.restrict(2).T == 2
    longer = panel.with_periods(5)
    assert longer.T == 5 and not longer.mask[:, 3:].any()
    with pytest.raises(DimensionError):
        panel.restrict(4)


def test_first_appearance_ignores_file_order(panel_builder):
    records = [("B", "g", 2, 2.0), ("A", "g", 1, 1.0), ("A", "g", 3, 3.0)]
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1)
    macro = _macro([(1, "x", 0.0)])
    in_order = panel_builder.build(_micro(sorted(records, key=lambda r: r[2])), macro, config)
    shuffled = panel_builder.build(_micro(records), macro, config)
    assert shuffled.row_subjects == in_order.row_subjects == ("A", "B")
    assert shuffled.registry.index_of("A") == 1
    assert min(shuffled.registry.times["A"]) == 1
    assert np.array_equal(shuffled.mask, in_order.mask)
    assert_allclose(shuffled.values[shuffled.mask], in_order.values[in_order.mask])


@settings(max_examples=25, deadline=None)
@given(st.permutations(list(range(6))))
def test_panel_invariant_to_row_permutations(order):
    records = [
        ("h2", "g", 1, 0.5), ("h1", "g", 1, 1.5), ("h1", "g", 2, 2.5),
        ("h3", "g", 2, -1.0), ("h2", "g", 3, 0.25), ("h3", "g", 4, 4.0),
    ]
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1)
    builder = PanelBuilder()
    reference = builder.build(_micro(records), _macro([(1, "x", 0.0)]), config)
    permuted = builder.build(_micro([records[i] for i in order]), _macro([(1, "x", 0.0)]), config)
    assert permuted.row_subjects == reference.row_subjects == ("h1", "h2", "h3")
    assert np.array_equal(permuted.mask, reference.mask)
    assert np.array_equal(permuted.values[permuted.mask], reference.values[reference.mask])


def test_with_cell_keeps_registry_in_step(panel_builder):
    micro = _micro([("a", "g", 1, 1.0)])
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1)
    panel = panel_builder.build(micro, _macro([(1, "x", 0.0)]), config, periods=3)
    updated = panel.with_cell(panel.row_of("a"), 3, 2.0)
    assert updated.registry.times["a"] == {1, 3}
    assert panel.registry.times["a"] == {1}
    macro_only = panel.with_cell(0, 2, 5.0)
    assert macro_only.registry.times["a"] == {1}
    for key in updated.row_subjects:
        row = updated.row_of(key)
        assert set(np.flatnonzero(updated.mask[row]) + 1) == updated.registry.times[key]
    with pytest.raises(DimensionError):
        panel.with_cell(0, 4, 1.0)


def test_restrict_and_mask_drop_registered_times(panel_builder):
    micro = _micro([("a", "g", 1, 1.0), ("a", "g", 3, 2.0)])
    config = ModelConfig(macro_series=["x"], groups=["g"], trend_map=[[1]], p=1)
    panel = panel_builder.build(micro, _macro([(1, "x", 0.0)]), config)
    assert panel.restrict(2).registry.times["a"] == {1}
    assert panel.without_time(1).registry.times["a"] == {3}
    assert panel.registry.times["a"] == {1, 3}


def test_with_member_appends_to_its_group(panel_builder):
    micro = _micro([("a", "g1", 1, 1.0), ("c", "g2", 1, 3.0)])
    config = ModelConfig(macro_series=["x"], groups=["g1", "g2"], trend_map=[[1], [1]], p=1)
    panel = panel_builder.build(micro, _macro([(1, "x", 0.0)]), config, periods=2)
    grown = panel.with_member("b", "g1")
    assert grown.row_subjects == ("a", "b", "c")
    assert grown.group_sizes == (2, 1)
    assert grown.n_rows == panel.n_rows + 1
    assert not grown.mask[grown.row_of("b")].any()
    assert grown.values[grown.row_of("c"), 0] == 3.0
    assert grown.registry.index_of("b") == 3 and grown.registry.groups["b"] == "g1"
    assert "b" not in panel.registry
    observed = grown.with_cell(grown.row_of("b"), 2, 4.0)
    assert observed.registry.times["b"] == {2}
    with pytest.raises(ConflictError):
        grown.with_member("a", "g1")
    with pytest.raises(ConfigError):
        panel.with_member("d", "g3")
