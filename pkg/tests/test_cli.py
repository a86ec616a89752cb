import json

import numpy as np
import pandas as pd
import pytest

from nemprice.cli import load_config, main
from nemprice.errors import ValidationError

CONFIG = """
seed = 11

[network]
regions = ["A", "B"]
arcs = [
  {id = "ab", origin = "A", destination = "B", nominal_capacity = 400.0, max_capacity = 380.0},
  {id = "ba", origin = "B", destination = "A", nominal_capacity = 400.0, max_capacity = 350.0},
]
arc_pairs = [["ab", "ba"]]

[generate]
calibration = "simple"
T = 2000
driver = "A"

[fit]
supply_regions = ["A"]
sweeps = 60
burn_in = 30

[copula]
lags = [1, 2]

[forecast]
origin = 1900
horizon = 12
draws = 200

[event]
draws = 300
"""

STAGES = [
    ["generate"],
    ["fit"],
    ["copula"],
    ["forecast"],
    ["forecast", "--mode", "joint", "--horizon", "3"],
    ["event", "supply-shock", "--region", "A", "--mwh", "150", "--at", "1500..1510"],
    ["event", "impulse", "--region", "A", "--dollars", "200", "--window", "1800..1803", "--horizon", "24"],
    ["deps", "--lags", "0,1,2"],
]


def pipeline(tmp_path, name, extra=()):
    cfg = tmp_path / "config.toml"
    cfg.write_text(CONFIG)
    run = tmp_path / name
    for stage in STAGES:
        assert main(["--config", str(cfg), "--run-dir", str(run), *extra, *stage]) == 0, stage
    return run


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return pipeline(base, "run1"), pipeline(base, "run2")


def outputs(run):
    m = json.loads((run / "manifest.json").read_text())
    return m, {stage: e["outputs"] for stage, e in m["stages"].items()}


def test_pipeline_is_deterministic(two_runs):
    (m1, o1), (m2, o2) = outputs(two_runs[0]), outputs(two_runs[1])
    assert o1 == o2
    assert m1["config_hash"] == m2["config_hash"] and m1["seed"] == m2["seed"] == 11
    for stage in m1["stages"]:
        assert m1["stages"][stage].get("seeds") == m2["stages"][stage].get("seeds")


def test_pipeline_artifacts(two_runs):
    run = two_runs[0]
    summary = pd.read_csv(run / "forecast" / "summary.csv")
    assert len(summary) == 3 * 2  # the joint run overwrote the 12-period conditional one
    assert {"timestamp", "mean", "q01", "q99"} <= set(summary.columns)
    assert np.all(np.diff(summary[[f"q{q:02d}" for q in (1, 5, 25, 50, 75, 95, 99)]].to_numpy(), axis=1) >= 0)
    flows = pd.read_csv(run / "forecast" / "flows.csv")
    assert np.all(flows.objective <= flows.baseline + 1e-12)
    assert (run / "data" / "truth.json").exists()
    shock = pd.read_csv(run / "events" / "supply_shock_A.csv")
    assert np.all(shock.delta > 0)
    tau = pd.read_csv(run / "deps" / "tau_A.csv")
    h0 = tau[tau.h == 0]
    np.testing.assert_allclose(np.diag(h0[["lag_A", "lag_B"]].to_numpy()), 1.0, atol=1e-9)
    impulse = pd.read_csv(run / "events" / "impulse_A.csv")
    assert impulse[(impulse.region == "A") & (impulse.horizon == 1)].delta_mean.iloc[0] > 0


def test_different_seed_changes_outputs(tmp_path, two_runs):
    cfg = tmp_path / "config.toml"
    cfg.write_text(CONFIG)
    run = tmp_path / "other"
    assert main(["--config", str(cfg), "--run-dir", str(run), "--seed", "12", "generate"]) == 0
    _, o = outputs(run)
    _, ref = outputs(two_runs[0])
    assert o["generate"]["data/prices.csv"] != ref["generate"]["data/prices.csv"]


def test_ingest_round_trip(tmp_path, two_runs):
    cfg = tmp_path / "config.toml"
    cfg.write_text(CONFIG)
    run = tmp_path / "ingested"
    src = two_runs[0] / "data"
    assert main(["--config", str(cfg), "--run-dir", str(run), "ingest", "--data", str(src)]) == 0
    m, o = outputs(run)
    _, ref = outputs(two_runs[0])
    assert o["ingest"]["data/prices.csv"] == ref["generate"]["data/prices.csv"]
    assert str(src / "prices.csv") in m["inputs"]


def test_missing_upstream_names_stage(tmp_path, capsys):
    cfg = tmp_path / "config.toml"
    cfg.write_text(CONFIG)
    assert main(["--config", str(cfg), "--run-dir", str(tmp_path / "empty"), "fit"]) == 2
    assert "'ingest or generate' stage" in capsys.readouterr().err
    assert main(["--config", str(cfg), "--run-dir", str(tmp_path / "g"), "generate", "--T", "300"]) == 0
    assert main(["--config", str(cfg), "--run-dir", str(tmp_path / "g"), "copula"]) == 2
    assert "'fit' stage" in capsys.readouterr().err


def test_malformed_config_reports_line(tmp_path, capsys):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("seed = 3\n[fit]\nsweeps = = 4\n")
    assert main(["--config", str(cfg), "generate"]) == 2
    assert "line 3" in capsys.readouterr().err


def test_bad_field_reports_field(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text('[fit]\nsweeps = "many"\n')
    with pytest.raises(ValidationError, match="fit.sweeps"):
        load_config(cfg)
    cfg.write_text("[fit]\nsweep = 10\n")
    with pytest.raises(ValidationError, match="fit.sweep"):
        load_config(cfg)
    cfg.write_text('[forecast]\nmode = "psychic"\n')
    with pytest.raises(ValidationError, match="forecast.mode"):
        load_config(cfg)


def test_numerical_failure_exit_code(monkeypatch, tmp_path):
    from nemprice import cli
    from nemprice.errors import NumericalError

    def boom(*a, **k):
        raise NumericalError("singular")

    monkeypatch.setattr(cli, "load_config", boom)
    assert main(["generate"]) == 3
