import json
from dataclasses import fields, replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from v2xtrust.cli import main
from v2xtrust.config import ScenarioConfig, config_from_dict, load_config
from v2xtrust.harness import (
    RunResult,
    compute_mttd,
    compute_rmse,
    read_runs,
    simulate,
    summarize,
    sweep,
    write_simulation,
    write_sweep,
)
from v2xtrust.world import ConfigError, FaultSpec

SHORT = ScenarioConfig(horizon=70.0)


def flat(n=100, v=1.0):
    return [(float(t), v) for t in range(n)]


# ---------------------------------------------------------------- MTTD


def test_mttd_jump_after_five_seconds():
    series = [(float(t), 1.0 if t < 55 else 1.2) for t in range(120)]
    assert compute_mttd(series, 50.0) == (True, 5.0)


def test_mttd_flat_series():
    assert compute_mttd(flat(), 50.0) == (False, None)


def test_mttd_outside_window():
    series = [(float(t), 1.0 if t < 111 else 2.0) for t in range(200)]
    assert compute_mttd(series, 50.0) == (False, None)
    series = [(float(t), 1.0 if t < 110 else 2.0) for t in range(200)]
    assert compute_mttd(series, 50.0) == (True, 60.0)


def test_mttd_needs_baseline():
    with pytest.raises(ValueError):
        compute_mttd(flat(), 10.0)
    with pytest.raises(ValueError):
        compute_mttd([], 10.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.0, 10.0), min_size=100, max_size=100), st.floats(31, 60))
def test_mttd_range(values, inject):
    detected, mttd = compute_mttd(list(enumerate(values)), inject)
    assert (mttd is not None) == detected
    if detected:
        assert 0 < mttd <= 60


# ---------------------------------------------------------------- RMSE


def test_rmse_examples():
    assert compute_rmse([0.0, 0.0, 0.0]) == 0.0
    assert compute_rmse([1.0] * 7) == pytest.approx(1.0)
    assert compute_rmse([3.0, 4.0]) == pytest.approx(3.5355339059327378)
    assert compute_rmse([]) is None


# ---------------------------------------------------------------- scenarios


@pytest.fixture(scope="module")
def short_clean():
    return simulate(SHORT, 1)


def test_result_fields_populated(short_clean):
    r = short_clean.result
    assert r.fault is None and r.inject_at is None and r.mttd is None and r.detected_by is None
    assert r.rounds == 70 and r.error is None
    assert r.rmse_with_trust is not None and r.rmse_without_trust is not None
    assert set(r.steady_trust) == set(r.final_trust) == set(r.alarms) == {"cav1", "cav2", "cav3", "cav4", "cis1", "cis2"}
    assert r.agreement_violations == 0 and r.auth_rejects == 0
    for f in fields(RunResult):
        assert hasattr(r, f.name)


def test_same_seed_same_files(tmp_path, short_clean):
    a = write_simulation(short_clean, tmp_path / "a")
    b = write_simulation(simulate(SHORT, 1), tmp_path / "b")
    for name in ("runs.jsonl", "trust.jsonl", "decisions.jsonl", "summary.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_different_seed_differs(short_clean):
    other = simulate(SHORT, 2).result
    assert other.rmse_with_trust != short_clean.result.rmse_with_trust


def test_e10_target_rejected_from_injection():
    cfg = SHORT.with_fault(FaultSpec("E10", "cav2", 1.0, 40.0))
    sim = simulate(cfg, 0)
    for d in sim.decisions:
        assert ("cav2" in d["excluded"]) == (d["t"] >= 40.0)
    r = sim.result
    assert r.detected and r.detected_by == "protocol" and r.mttd == 0.0


@pytest.mark.parametrize("eid", ["E11", "E12", "E13"])
def test_comm_faults_detected_quickly(eid):
    sim = simulate(SHORT.with_fault(FaultSpec(eid, "cav2", 1.0, 40.0)), 0)
    r = sim.result
    assert r.detected and r.detected_by == "protocol" and r.mttd <= 2.0
    assert r.agreement_violations == 0


def test_e9_only_changes_fusion_inputs():
    base = simulate(SHORT, 3).result
    hit = simulate(SHORT.with_fault(FaultSpec("E9", "cav1", 90.0, 40.0)), 3).result
    assert base.rounds_contested == hit.rounds_contested
    assert base.rmse_with_trust != hit.rmse_with_trust


def test_inject_at_drawn_from_window():
    cfg = ScenarioConfig(horizon=5.0).with_fault(FaultSpec("E1", "cav1", 2.0))
    r = simulate(cfg, 4).result
    assert 120.0 <= r.inject_at <= 540.0
    assert r.inject_at == simulate(cfg, 4).result.inject_at


# ---------------------------------------------------------------- sweeps and persistence


@pytest.fixture(scope="module")
def small_sweep():
    tiny = ScenarioConfig(horizon=3.0)
    return sweep(tiny, [("E1", 2.0)], range(10))


def test_sweep_shape(small_sweep):
    assert len(small_sweep) == 10
    assert [r.seed for r in small_sweep] == list(range(10))
    assert all(r.error is None for r in small_sweep)


def test_detection_rate_definition(small_sweep):
    rs = [replace(r, detected=(r.seed % 3 == 0)) for r in small_sweep]
    row = summarize(rs)[0]
    assert row["runs"] == 10 and row["detected"] == 4
    assert row["detection_rate"] == pytest.approx(0.4)


def test_sweep_roundtrip_through_files(tmp_path, small_sweep):
    out = write_sweep(small_sweep, tmp_path)
    again = read_runs(out / "runs.jsonl")
    assert again == small_sweep
    assert summarize(again) == summarize(small_sweep)
    with open(out / "summary.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header[0] == "schema"


def test_sweep_worker_count_does_not_change_results():
    tiny = ScenarioConfig(horizon=2.0)
    grid = [("E4", 0.5), ("none", 0.0)]
    assert sweep(tiny, grid, [0, 1], workers=2) == sweep(tiny, grid, [0, 1], workers=1)


def test_failed_cell_recorded_not_raised(monkeypatch):
    import v2xtrust.harness as h

    def boom(cfg, seed):
        raise RuntimeError("kaput")

    monkeypatch.setattr(h, "run_scenario", boom)
    (r,) = sweep(ScenarioConfig(horizon=2.0), [("E1", 1.0)], [0])
    assert r.error == "RuntimeError: kaput" and not r.detected
    assert summarize([r])[0]["failed"] == 1


def test_record_schema_checked():
    rec = {"schema": 99}
    with pytest.raises(ValueError):
        RunResult.from_record(rec)


# ---------------------------------------------------------------- configuration


def test_example_config_equals_defaults():
    assert load_config("configs/intersection.yaml") == ScenarioConfig()


@pytest.mark.parametrize(
    "doc",
    [
        {"bogus": 1},
        {"horizon": "long"},
        {"trust": {"sds_max": -1}},
        {"fault": {"error_id": "E42", "target": "cav1", "magnitude": 1}},
        {"fault": {"error_id": "E1", "target": "ghost", "magnitude": 1}},
        {"consensus": {"sensing_timeout": 0.6, "aggregate_timeout": 0.6}},
        {"schema": 7},
    ],
)
def test_invalid_configs_rejected(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_noise_override():
    cfg = config_from_dict({"noise_scale": {"cav2": 2.0}, "horizon": 30})
    assert cfg.world.participant("cav2").noise_scale == 2.0
    assert cfg.world.participant("cav1").noise_scale == 1.0
    assert cfg.horizon == 30.0


# ---------------------------------------------------------------- CLI


def test_cli_run_and_report(tmp_path, capsys):
    assert main(["run", "--seed", "0", "--horizon", "3", "--out", str(tmp_path / "r")]) == 0
    line = capsys.readouterr().out.strip().splitlines()[0]
    assert json.loads(line)["seed"] == 0
    assert main(["report", str(tmp_path / "r" / "runs.jsonl"), "--out", str(tmp_path / "s.csv")]) == 0
    assert (tmp_path / "s.csv").exists()


def test_cli_sweep(tmp_path, capsys):
    rc = main(["sweep", "--grid", "E4:0.5;none", "--seeds", "0,1", "--horizon", "2", "--out", str(tmp_path)])
    assert rc == 0
    rows = [json.loads(x) for x in capsys.readouterr().out.strip().splitlines()]
    assert [(r["error_id"], r["runs"]) for r in rows] == [("none", 2), ("E4", 2)]


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("horizon: [1, 2\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert main(["sweep", "--grid", "E77:1", "--out", str(tmp_path)]) == 2
    assert main(["report", str(tmp_path / "missing.jsonl")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code != 0
