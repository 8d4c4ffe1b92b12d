import csv
import json

import numpy as np
import pytest

from mbcpp.cli import main
from mbcpp.scenario import sample_default_scenario, save_scenario


@pytest.fixture
def scenario_file(tmp_path):
    path = tmp_path / "s.json"
    save_scenario(sample_default_scenario(1, 5, (3.5e9, 12e9)), path)
    return path


def read(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_bounds(tmp_path, scenario_file):
    out = tmp_path / "b.csv"
    assert main(["bounds", "--scenario", str(scenario_file), "--n-mc", "200", "--out", str(out)]) == 0
    rows = read(out)
    assert rows[0] == ["scenario_id", "peb_delay_m", "peb_known_m", "peb_mi_m", "int_err_rate"]
    assert "e" in rows[1][1] and float(rows[1][2]) < float(rows[1][1])


def test_estimate(tmp_path, scenario_file):
    out = tmp_path / "e.csv"
    assert main(["estimate", "--scenario", str(scenario_file), "--trials", "4", "--n-search", "3", "--no-curvature-margin",
                 "--out", str(out)]) == 0
    rows = read(out)
    assert rows[0] == ["trial_id", "x_err_m", "stage1_err_m", "ml_cost", "int_correct"]
    assert len(rows) == 5 and all(r[4] in ("0", "1") for r in rows[1:])


def test_sweep(tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--preset", "fig4", "--trials", "1", "--seed", "2", "--out", str(out)]) == 0
    assert len(read(out)) == 1 + 8 * 5
    assert json.loads((tmp_path / "s.csv.meta.json").read_text())["seed"] == 2


def test_signal(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["signal", "--link", "fc_ghz=3.5,distance_m=80", "--trials", "20", "--out", str(out)]) == 0
    rows = read(out)
    assert rows[0] == ["delay_err", "phase_err"] and len(rows) == 21
    assert main(["signal", "--paths", "500:-6", "--trials", "3", "--out", str(out)]) == 0


def test_exit_codes(tmp_path, scenario_file):
    assert main(["bounds", "--scenario", str(tmp_path / "missing.json")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"bs_positions": [[1, 1]], "bands": []}))
    assert main(["bounds", "--scenario", str(bad)]) == 2
    assert main(["sweep", "--preset", "nope"]) == 2
    assert main(["signal", "--link", "volume=11"]) == 2
    assert main(["estimate", "--scenario", str(scenario_file), "--trials", "0"]) == 2
    collinear = tmp_path / "line.json"
    collinear.write_text(json.dumps({"bs_positions": [[10, 0], [20, 0], [30, 0]],
                                     "ue_position": [0, 0], "bands": [{"carrier_frequency_hz": 3.5e9}]}))
    assert main(["bounds", "--scenario", str(collinear)]) == 3
