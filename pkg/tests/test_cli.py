import json

import pandas as pd
import pytest

from mdfm.cli import run


@pytest.fixture
def config_path(tmp_path, small_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(small_config.model_dump()))
    return str(path)


@pytest.fixture
def simulated(tmp_path, config_path):
    out = tmp_path / "sim"
    code = run(["simulate", "--config", config_path, "--periods", "16", "--group-sizes", "6", "6",
                "--seed", "1", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture
def estimated(tmp_path, config_path, simulated):
    out = tmp_path / "fit"
    code = run(["estimate", "--config", config_path, "--macro", str(simulated / "macro.csv"),
                "--micro", str(simulated / "micro.csv"), "--max-iterations", "2", "--out", str(out)])
    assert code == 0
    return out


def test_simulate_writes_panels_and_truth(simulated):
    for name in ["macro.csv", "micro.csv", "states.csv", "truth.json"]:
        assert (simulated / name).exists()
    macro = pd.read_csv(simulated / "macro.csv")
    assert list(macro.columns) == ["time", "series", "value"]
    assert len(macro) == 2 * 16
    truth = json.loads((simulated / "truth.json").read_text())
    assert truth["config"]["group_sizes"] == [6, 6]


def test_estimate_writes_model_trace_and_parameters(estimated):
    model = json.loads((estimated / "model.json").read_text())
    trace = pd.read_csv(estimated / "trace.csv")
    parameters = pd.read_csv(estimated / "parameters.csv")
    assert trace["iteration"].tolist() == list(range(model["iterations"] + 1))
    assert pd.isna(trace.loc[0, "median_delta"])
    assert parameters["name"].tolist() == model["parameter_names"]
    assert len(parameters) == len(model["parameters"])


def test_estimate_is_reproducible(tmp_path, config_path, simulated, estimated):
    again = tmp_path / "again"
    code = run(["estimate", "--config", config_path, "--macro", str(simulated / "macro.csv"),
                "--micro", str(simulated / "micro.csv"), "--max-iterations", "2", "--out", str(again)])
    assert code == 0
    for name in ["model.json", "trace.csv", "parameters.csv"]:
        assert (again / name).read_bytes() == (estimated / name).read_bytes()


def test_decompose(tmp_path, simulated, estimated):
    out = tmp_path / "dec"
    code = run(["decompose", "--model", str(estimated / "model.json"), "--macro", str(simulated / "macro.csv"),
                "--micro", str(simulated / "micro.csv"), "--out", str(out)])
    assert code == 0
    frame = pd.read_csv(out / "decomposition.csv")
    summary = pd.read_csv(out / "group_summary.csv")
    assert set(frame["entity"]) >= {"gdp", "prices"}
    assert set(summary["group"]) == {"low", "high"}


def test_nowcast(tmp_path, simulated, estimated):
    macro = pd.read_csv(simulated / "macro.csv")
    calendar = pd.DataFrame({
        "release_date": macro["time"] + 1,
        "series": macro["series"],
        "ref_period": macro["time"],
        "value": macro["value"],
    })
    calendar_path = tmp_path / "calendar.csv"
    calendar.to_csv(calendar_path, index=False)
    out = tmp_path / "now"
    code = run(["nowcast", "--model", str(estimated / "model.json"), "--calendar", str(calendar_path),
                "--targets", "16", "--out", str(out)])
    assert code == 0
    estimates = pd.read_csv(out / "early_estimates.csv")
    assert list(estimates.columns) == ["release_date", "group", "ref_period", "estimate"]
    assert len(estimates) == 16 * 2
    assert (estimates["ref_period"] == 16).all()


def test_nowcast_from_a_partial_base(tmp_path, simulated, estimated):
    macro = pd.read_csv(simulated / "macro.csv")
    micro = pd.read_csv(simulated / "micro.csv", dtype={"subject_id": str, "group_id": str})
    macro[macro["time"] <= 12].to_csv(tmp_path / "base_macro.csv", index=False)
    micro[micro["time"] <= 12].to_csv(tmp_path / "base_micro.csv", index=False)
    later = micro[micro["time"] > 12]
    calendar = pd.DataFrame({
        "release_date": later["time"] + 1,
        "series": later["subject_id"],
        "ref_period": later["time"],
        "value": later["value"],
        "group_id": later["group_id"],
    })
    calendar = pd.concat([calendar, pd.DataFrame([{
        "release_date": 20, "series": "low-h9999", "ref_period": 16, "value": 0.5, "group_id": "low",
    }])], ignore_index=True)
    calendar.to_csv(tmp_path / "calendar.csv", index=False)
    out = tmp_path / "now"
    code = run(["nowcast", "--model", str(estimated / "model.json"), "--calendar", str(tmp_path / "calendar.csv"),
                "--macro", str(tmp_path / "base_macro.csv"), "--micro", str(tmp_path / "base_micro.csv"),
                "--targets", "12", "16", "--out", str(out)])
    assert code == 0
    estimates = pd.read_csv(out / "early_estimates.csv")
    assert set(estimates["ref_period"]) == {12, 16}
    assert estimates["release_date"].max() == 20


def test_malformed_config(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text("{")
    code = run(["simulate", "--config", str(path), "--out", str(tmp_path / "out")])
    assert code == 2
    assert "error [" in capsys.readouterr().err


def test_invalid_config_values(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"macro_series": ["gdp"], "p": 0}))
    assert run(["simulate", "--config", str(path), "--out", str(tmp_path / "out")]) == 2
    assert "error [" in capsys.readouterr().err


def test_missing_required_input(config_path, tmp_path):
    assert run(["estimate", "--config", config_path, "--out", str(tmp_path / "out")]) == 2


def test_missing_file(tmp_path, config_path):
    code = run(["estimate", "--config", config_path, "--macro", str(tmp_path / "absent.csv"),
                "--out", str(tmp_path / "out")])
    assert code == 3


def test_unknown_subcommand():
    assert run(["forecast"]) == 2
