import csv
import json

import numpy as np
import pytest

from clusteriv.centering import read_triplets
from clusteriv.cli import load_dataset, main, write_dataset
from clusteriv.errors import MissingColumn, NonFiniteValue, RankDeficientControls
from clusteriv.simulation import DgpSpec, generate


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def panel_csv(tmp_path):
    data, _ = generate(DgpSpec("dynamic_panel", {"N": 60, "T": 4}, seed=2))
    path = tmp_path / "panel.csv"
    write_dataset(data, path, controls=False)
    return path


@pytest.fixture
def spatial_csv(tmp_path):
    spec = DgpSpec("spatial_interference", {"N": 6, "T": 15, "box_km": 4.0}, seed=1)
    data, _ = generate(spec)
    path = tmp_path / "spatial.csv"
    write_dataset(data, path, controls=False)
    return path


def test_load_minimal(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["cluster", "y", "x"],
                  [["a", 1, 2], ["a", 2, 3], ["b", 0, 1], ["b", 5, 4]])
    data = load_dataset(p)
    assert data.n == 4 and data.W.K == 1 and data.partition.N == 2
    assert load_dataset(p, intercept=False).W.K == 0
    assert load_dataset(p, cluster_fe=True).W.K == 2


def test_load_errors(tmp_path):
    dup = write_csv(tmp_path / "dup.csv", ["cluster", "y", "x", "x"], [[1, 1, 2, 2]])
    with pytest.raises(MissingColumn):
        load_dataset(dup)
    miss = write_csv(tmp_path / "miss.csv", ["cluster", "y"], [[1, 1]])
    with pytest.raises(MissingColumn):
        load_dataset(miss)
    nan = write_csv(tmp_path / "nan.csv", ["cluster", "y", "x"], [[1, "nan", 2], [1, 1, 1]])
    with pytest.raises(NonFiniteValue):
        load_dataset(nan)
    rows = [[i // 2, i, i * i, 2 * i, 4 * i] for i in range(6)]
    col = write_csv(tmp_path / "col.csv", ["cluster", "y", "x", "w1", "w2"], rows)
    with pytest.raises(RankDeficientControls):
        load_dataset(col)


def test_write_load_round_trip(tmp_path, panel_csv):
    data = load_dataset(panel_csv, intercept=False, cluster_fe=True)
    data2, _ = generate(DgpSpec("dynamic_panel", {"N": 60, "T": 4}, seed=2))
    assert np.array_equal(data.y, data2.y) and np.array_equal(data.x, data2.x)
    assert np.array_equal(data.time, data2.time)


def test_estimate_command(capsys, panel_csv):
    code, out, _ = run(capsys, "estimate", panel_csv, "--recipe", "weak_exogeneity",
                       "--cluster-fe", "--no-intercept")
    assert code == 0
    d = json.loads(out)
    assert d["estimate"]["method"] == "leaveout"
    assert d["ols"]["beta_hat"] < d["estimate"]["beta_hat"]


def test_infer_command_and_ar_curve(capsys, tmp_path, panel_csv):
    curve = tmp_path / "curve.csv"
    code, out, _ = run(capsys, "infer", panel_csv, "--alpha", "0.05", "--recipe",
                       "weak_exogeneity", "--cluster-fe", "--ar-curve", curve)
    assert code == 0
    d = json.loads(out)
    assert d["ar_set"]["kind"] in ("bounded_interval", "complement_of_interval", "whole_line")
    assert len(d["ar_set"]["endpoints"]) in (0, 2)
    grid = np.loadtxt(curve, delimiter=",", skiprows=1)
    assert grid.shape == (401, 2)
    assert grid[200, 1] == pytest.approx(0.0, abs=1e-12)
    code, _, err = run(capsys, "infer", panel_csv, "--alpha", "0.05")
    assert code == 0


def test_infer_rejects_bad_alpha(capsys, panel_csv):
    with pytest.raises(SystemExit):
        main(["infer", str(panel_csv), "--alpha", "1.5"])


def test_error_json(capsys, tmp_path, panel_csv):
    dup = write_csv(tmp_path / "dup.csv", ["cluster", "y", "y", "x"], [[1, 1, 1, 2]])
    code, _, err = run(capsys, "estimate", dup)
    assert code == 2
    assert json.loads(err)["error"] == "MissingColumn"
    code, _, err = run(capsys, "estimate", panel_csv, "--recipe", "contemporaneous",
                       "--cluster-fe")
    assert code == 2 and json.loads(err)["error"] == "DegenerateDenominator"
    code, _, err = run(capsys, "estimate", tmp_path / "absent.csv")
    assert code == 2
    code, _, err = run(capsys, "diagnose", panel_csv, "--recipe", "distance")
    assert code == 2


def test_diagnose_trace_decreases_with_radius(capsys, tmp_path, spatial_csv):
    traces = []
    for r in ("0", "1", "3"):
        code, out, _ = run(capsys, "diagnose", spatial_csv, "--recipe", "distance",
                           "--radius", r, "--cluster-fe", "--mode", "design")
        assert code == 0
        traces.append(json.loads(out)["trace"])
    assert traces[0] > traces[1] > traces[2]


def test_diagnose_triplets(capsys, tmp_path, panel_csv):
    trip = tmp_path / "a.csv"
    code, out, _ = run(capsys, "diagnose", panel_csv, "--recipe", "weak_exogeneity",
                       "--cluster-fe", "--triplets", trip, "--threshold", "0.05")
    d = json.loads(out)
    assert code == 0 and d["threshold"] == 0.05
    A = read_triplets(trip, 240)
    assert A.nnz == d["triplets_written"]
    assert np.all(np.abs(A.data) > 0.05)


SPEC = """kind = dynamic_panel
N = 30
T = 4
recipe = weak_exogeneity
replications = 100
"""


def test_simulate_deterministic(capsys, tmp_path, monkeypatch):
    cfg = tmp_path / "dyn.cfg"
    cfg.write_text(SPEC)
    o1, o2 = tmp_path / "r1.json", tmp_path / "r2.json"
    draws = tmp_path / "draws.csv"
    data = tmp_path / "data.csv"
    assert run(capsys, "simulate", "--spec", cfg, "--seed", 3, "-o", o1, "--draws", draws,
               "--emit-data", data)[0] == 0
    monkeypatch.setenv("CLUSTERIV_THREADS", "3")
    assert run(capsys, "simulate", "--spec", cfg, "--seed", 3, "-o", o2)[0] == 0
    assert o1.read_bytes() == o2.read_bytes()
    report = json.loads(o1.read_text())
    assert report["replications"] == 100 and "runtime" not in report
    assert np.genfromtxt(draws, delimiter=",", names=True).size == 100
    assert load_dataset(data, intercept=False).W.K == 30
    code, out, _ = run(capsys, "simulate", "--spec", cfg, "--timing", "--replications", 100)
    assert "runtime" in json.loads(out)


def test_simulate_bad_spec(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("N = 3\n")
    code, _, err = run(capsys, "simulate", "--spec", cfg)
    assert code == 2 and json.loads(err)["error"] == "InvalidSpec"
