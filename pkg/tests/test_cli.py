import csv
import io
import json

import pytest

from tpshift import load_table
from tpshift.cli import main

FAST_ARGS = ["--l-max", "1024", "--global-batch", "16", "--seed", "1"]


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_simulate_json(capsys):
    code, out, err = run_cli(capsys, "simulate", "--config", "paper_a40",
                             *FAST_ARGS)
    assert code == 0
    doc = json.loads(out)
    assert doc["mode"] == "adaptive"
    assert doc["global_batch"] == 16
    assert doc["tokens_generated"] > 0


def test_simulate_deterministic_bytes(capsys):
    _, first, _ = run_cli(capsys, "simulate", "--config", "paper_a40",
                          *FAST_ARGS)
    _, second, _ = run_cli(capsys, "simulate", "--config", "paper_a40",
                           *FAST_ARGS)
    assert first == second


def test_simulate_timeline(capsys):
    code, out, _ = run_cli(capsys, "simulate", "--config", "paper_a40",
                           "--format", "timeline", *FAST_ARGS)
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["time_s", "node", "event", "active_count", "tp", "detail"]
    times = [float(r[0]) for r in rows[1:]]
    assert times == sorted(times)
    kinds = {r[2] for r in rows[1:]}
    assert "step-block" in kinds and "completion" in kinds


def test_simulate_static_mode(capsys):
    code, out, _ = run_cli(capsys, "simulate", "--config", "paper_a40",
                           "--mode", "static", *FAST_ARGS)
    assert code == 0
    assert json.loads(out)["eval_count"] == 0


def test_profile_roundtrip(tmp_path, capsys):
    out_path = tmp_path / "profile.csv"
    code, _, _ = run_cli(capsys, "profile", "--config", "paper_a40",
                         "--out", str(out_path))
    assert code == 0
    table = load_table(str(out_path))
    assert set(p.tp for p in table.points) == {1, 2, 4, 8}


def test_compare_reports_speedup(capsys):
    code, out, _ = run_cli(capsys, "compare", "--config", "paper_a40",
                           *FAST_ARGS)
    assert code == 0
    doc = json.loads(out)
    # Short-tail scenario: no performance claim here, just shape and wiring.
    assert doc["speedup"] > 0.0
    rows = {r["mode"]: r for r in doc["rows"] if r["mode"] == "adaptive"}
    assert rows["adaptive"]["generation_time"] > 0.0
    assert len([r for r in doc["rows"] if r["mode"] == "static"]) == 4
    assert doc["reference_switch"]["naive"]["total"] == pytest.approx(58.98)


def test_sweep_csv(capsys):
    code, out, _ = run_cli(capsys, "sweep", "--config", "paper_a40",
                           "--seed", "1", "--l-max-values", "768,1024",
                           "--format", "csv")
    assert code == 0
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0][0] == "l_max"
    assert [r[0] for r in rows[1:]] == ["768", "1024"]
    for row in rows[1:]:
        assert float(row[4]) >= 0.99


def test_sweep_json_to_file(tmp_path, capsys):
    out_path = tmp_path / "sweep.json"
    code, out, _ = run_cli(capsys, "sweep", "--config", "paper_a40",
                           "--seed", "1", "--l-max-values", "768",
                           "--out", str(out_path))
    assert code == 0
    assert out == ""
    doc = json.loads(out_path.read_text())
    assert doc["points"][0]["l_max"] == 768


def test_usage_errors_exit_one(capsys):
    code, _, err = run_cli(capsys, "frobnicate")
    assert code == 1
    code, _, err = run_cli(capsys, "simulate")
    assert code == 1
    assert "required" in err


def test_missing_config_exits_two(capsys):
    code, _, err = run_cli(capsys, "simulate", "--config", "nope")
    assert code == 2
    assert "config error" in err


def test_invalid_scenario_exits_three(capsys):
    code, _, err = run_cli(capsys, "simulate", "--config", "paper_a40",
                           "--global-batch", "999")
    assert code == 3
    assert "invalid scenario" in err
