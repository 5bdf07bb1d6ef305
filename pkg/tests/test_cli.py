import csv
import json
import subprocess
import sys
from datetime import datetime

import pytest

from bulkiface.cli import main

FAST = ["--set", "resolution=4", "--set", "solver.t_end=0.05"]


def _run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path)])


def test_simulate_outputs(tmp_path):
    assert _run(tmp_path, "simulate", *FAST) == 0
    for name in ("mesh.csv", "ledger.csv", "entropy.csv", "summary.json"):
        assert (tmp_path / name).exists()
    snaps = sorted((tmp_path / "snapshots").glob("*.csv"))
    assert snaps
    with open(snaps[0]) as fh:
        assert next(csv.reader(fh)) == ["cell_id", "u_1", "u_2"]
    with open(tmp_path / "ledger.csv") as fh:
        head = next(csv.reader(fh))
    assert head[:2] == ["t", "dt"] and head[-4:] == ["H", "D_bulk", "D_int", "floored_mass"]
    # one sidecar per CSV with ISO-8601 stamps
    csvs = list(tmp_path.rglob("*.csv"))
    for p in csvs:
        meta = json.loads(p.with_suffix(".meta.json").read_text())
        datetime.fromisoformat(meta["created"])
        datetime.fromisoformat(meta["started"])
        assert meta["command"] == "simulate" and meta["file"] == p.name


def test_simulate_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run(a, "simulate", *FAST) == 0
    assert _run(b, "simulate", *FAST) == 0
    for p in a.rglob("*.csv"):
        assert p.read_bytes() == (b / p.relative_to(a)).read_bytes()


def test_config_errors(tmp_path):
    assert _run(tmp_path, "simulate", "--scenario", str(tmp_path / "missing.json")) == 1
    assert _run(tmp_path, "simulate", "--set", "resolution=1") == 1
    assert _run(tmp_path, "simulate", "--scenario", "builtin:nope") == 1
    assert _run(tmp_path, "simulate", "--seed", "-1") == 1
    assert _run(tmp_path, "sweep", "--set", "run.axis=temperature") == 1
    assert _run(tmp_path, "verify-all", "--set", "run.suites=[]") == 1


def test_scenario_file(tmp_path):
    from bulkiface.solver import builtin_scenario_dict

    d = builtin_scenario_dict("flat_linear")
    d["resolution"] = 4
    d["solver"]["t_end"] = 0.05
    path = tmp_path / "sc.json"
    path.write_text(json.dumps(d))
    assert _run(tmp_path / "o", "simulate", "--scenario", str(path)) == 0
    path.write_text("[1, 2]")
    assert _run(tmp_path / "o", "simulate", "--scenario", str(path)) == 1


def test_runtime_abort(tmp_path):
    code = _run(tmp_path, "simulate", "--set", "resolution=4", "--set", "solver.dt_init=1.0",
                "--set", "solver.dt_min=0.9")
    assert code == 2
    assert "message" in json.loads((tmp_path / "abort.json").read_text())


def test_verification_failure(tmp_path):
    # an unrefined series cannot show residual decay
    code = _run(tmp_path, "renorm-residual", "--set", "run.levels=[[8, 0.004], [8, 0.004]]",
                "--set", "run.t_end=0.1")
    assert code == 3
    rep = json.loads((tmp_path / "residual_report.json").read_text())
    assert not rep["ok"]


def test_residual_json_records(tmp_path):
    code = _run(tmp_path, "renorm-residual", "--set", "run.levels=[[4, 0.016], [8, 0.004]]",
                "--set", "run.t_end=0.1")
    assert code in (0, 3)
    recs = json.loads((tmp_path / "residuals.json").read_text())
    assert set(recs[0]) >= {"test_id", "anchor", "E", "residual", "refinement_series", "fitted_order"}
    assert len(recs[0]["refinement_series"]) == 2


def test_stability_outputs(tmp_path):
    assert _run(tmp_path, "stability", *FAST, "--seed", "7") == 0
    st = json.loads((tmp_path / "stability.json").read_text())
    assert st["H_rel_0"] > 0
    with open(tmp_path / "stability.csv") as fh:
        assert next(csv.reader(fh))[0] == "t"
    assert (tmp_path / "stability.meta.json").exists()


def test_verify_fast_suites(tmp_path):
    assert _run(tmp_path, "verify-truncations") == 0
    assert _run(tmp_path, "verify-kinetics", "--set", "run.n_samples=2000", "--set", "run.negative_controls=true") == 0
    assert _run(tmp_path, "verify-geometry", "--set", "run.n_samples=200", "--set", "run.n_pou=500") == 0
    assert _run(tmp_path, "verify-kinetics", "--set", "run.n_samples=10") == 1


def test_entropy_report(tmp_path):
    assert _run(tmp_path, "entropy-report", *FAST) == 0
    rep = json.loads((tmp_path / "entropy_report.json").read_text())
    assert rep["max_positive_defect"] == 0.0


@pytest.mark.parametrize("axis,values", [("N", "[2, 4]"), ("resolution", "[4, 8]")])
def test_sweep(tmp_path, axis, values):
    assert _run(tmp_path, "sweep", *FAST, "--set", f"run.axis={axis}", "--set", f"run.values={values}") == 0
    with open(tmp_path / f"sweep_{axis}.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == axis and len(rows) == 3


def test_module_entry_point(tmp_path):
    p = subprocess.run([sys.executable, "-m", "bulkiface", "simulate", *FAST, "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert p.returncode == 0, p.stderr
