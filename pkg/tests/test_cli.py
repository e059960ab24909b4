"""Config-driven entry point: schema gate, commands, exit codes, reports."""

import json
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

from flowgeom.cli import main

REPO_ROOT = Path(__file__).resolve().parent.parent


def write_cfg(tmp_path, name, payload):
    p = tmp_path / name
    p.write_text(json.dumps(payload))
    return str(p)


def run(tmp_path, cfg, *flags, sub=None):
    path = write_cfg(tmp_path, "cfg.json", cfg)
    out = str(tmp_path / "report.json")
    code = main([sub or cfg["command"], path, "--out", out, *flags])
    report = None
    if (tmp_path / "report.json").exists():
        report = json.loads((tmp_path / "report.json").read_text())
    return code, report


# ----------------------------------------------------------- config gate


def test_shipped_schema_matches_package_schema():
    packaged = (resources.files("flowgeom") / "schemas"
                / "config.schema.json").read_bytes()
    docs = REPO_ROOT / "docs" / "config.schema.json"
    assert docs.read_bytes() == packaged


def test_missing_config_file(tmp_path):
    assert main(["verify", str(tmp_path / "absent.json")]) == 2


def test_unparseable_config(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert main(["verify", str(p)]) == 2


def test_missing_scenario_field(tmp_path, capsys):
    code, _ = run(tmp_path, {"command": "verify"})
    assert code == 2
    assert "scenario" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    code, _ = run(tmp_path, {"command": "verify",
                             "scenario": {"name": "flat"},
                             "n_probess": 3})
    assert code == 2
    assert "n_probess" in capsys.readouterr().err


def test_unknown_scenario_name(tmp_path):
    code, _ = run(tmp_path, {"command": "verify",
                             "scenario": {"name": "moebius"}})
    assert code == 2


def test_too_few_paths_rejected(tmp_path):
    code, _ = run(tmp_path, {"command": "estimate", "check": "decompose",
                             "scenario": {"name": "flat"}, "n_paths": 10})
    assert code == 2


def test_flag_override_is_validated(tmp_path):
    cfg = {"command": "estimate", "check": "decompose",
           "scenario": {"name": "flat"}, "n_paths": 200,
           "t": 0.1, "dt": 1e-2}
    code, _ = run(tmp_path, cfg, "--paths", "10")
    assert code == 2


def test_subcommand_must_match_config(tmp_path):
    code, _ = run(tmp_path, {"command": "verify",
                             "scenario": {"name": "flat"}}, sub="tensors")
    assert code == 2


def test_estimate_requires_check(tmp_path):
    code, _ = run(tmp_path, {"command": "estimate",
                             "scenario": {"name": "flat"}})
    assert code == 2


# --------------------------------------------------------------- tensors


def test_tensors_flat_all_zero(tmp_path):
    code, rep = run(tmp_path, {
        "command": "tensors", "scenario": {"name": "flat", "params": {"n": 2}},
        "points": [{"x": [0.3, -0.5]}],
    })
    assert code == 0
    assert "index_convention" in rep
    pt = rep["points"][0]
    assert np.max(np.abs(pt["gamma_lw"])) == 0.0
    assert np.max(np.abs(pt["curvature_lw"])) == 0.0
    assert np.max(np.abs(pt["ricci_lw"])) == 0.0
    np.testing.assert_allclose(pt["g"], np.eye(2))


def test_tensors_sphere_ricci_equals_metric(tmp_path):
    code, rep = run(tmp_path, {
        "command": "tensors",
        "scenario": {"name": "sphere-gradient", "params": {"n": 2}},
        "points": [{"chart": "n", "x": [0.4, 0.1]}],
    })
    assert code == 0
    pt = rep["points"][0]
    np.testing.assert_allclose(pt["ricci_lw"], pt["g"], atol=1e-6)
    # p = 2 moment form degenerates on this scenario
    assert abs(pt["h_lo"]) < 1e-8 and abs(pt["h_hi"]) < 1e-8


def test_tensors_default_probes(tmp_path):
    code, rep = run(tmp_path, {
        "command": "tensors", "scenario": {"name": "so3-left-invariant"},
    })
    assert code == 0
    assert len(rep["points"]) == 5  # start plus four samples


# ---------------------------------------------------------------- verify


def test_verify_sphere(tmp_path):
    code, rep = run(tmp_path, {
        "command": "verify",
        "scenario": {"name": "sphere-gradient", "params": {"n": 2}},
        "n_probes": 4,
    })
    assert code == 0
    assert rep["status"] == "passed"
    assert rep["flags"]["lw_equals_lc"] is True
    assert rep["flags"]["tss"] is True
    assert all(row["passed"] for row in rep["identities"])


def test_verify_so3(tmp_path):
    code, rep = run(tmp_path, {
        "command": "verify", "scenario": {"name": "so3-left-invariant"},
        "n_probes": 4,
    })
    assert code == 0
    assert rep["flags"]["lw_equals_lc"] is False
    assert rep["flags"]["tss"] is True
    assert rep["flags"]["curvature_zero"] is True
    names = [row["name"] for row in rep["identities"]]
    assert "metricity_adjoint" in names
    assert "ricci_comparison_psd" in names
    assert "ricci_comparison_zero" not in names


def test_verify_twisted_plane(tmp_path):
    code, rep = run(tmp_path, {
        "command": "verify",
        "scenario": {"name": "twisted-plane", "params": {"alpha": 0.5}},
        "n_probes": 4,
    })
    assert code == 0
    assert rep["status"] == "passed"
    assert rep["flags"]["lw_equals_lc"] is False
    assert rep["flags"]["tss"] is False


# -------------------------------------------------------------- simulate


def test_simulate_with_path_dump(tmp_path):
    cfg = {"command": "simulate",
           "scenario": {"name": "sphere-gradient", "params": {"n": 2}},
           "t": 0.2, "dt": 1e-2, "n_paths": 120, "seed": 7}
    path = write_cfg(tmp_path, "sim.json", cfg)
    out = str(tmp_path / "sim_report.json")
    csv_path = tmp_path / "paths.csv"
    code = main(["simulate", path, "--out", out, "--dump-paths", str(csv_path)])
    assert code == 0
    rep = json.loads((tmp_path / "sim_report.json").read_text())
    assert rep["status"] == "passed"
    assert rep["reconstruction"]["max_defect"] <= 1e-10
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].split(",")[:3] == ["path", "chart", "alive"]
    assert len(lines) == 121


def test_simulate_recorded_dump(tmp_path):
    cfg = {"command": "simulate", "scenario": {"name": "circle"},
           "t": 0.05, "dt": 1e-2, "n_paths": 100, "seed": 1, "record": True}
    path = write_cfg(tmp_path, "rec.json", cfg)
    csv_path = tmp_path / "rec.csv"
    code = main(["simulate", path, "--dump-paths", str(csv_path)])
    assert code == 0
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0].split(",")[:5] == ["path", "step", "time", "chart", "alive"]
    assert len(lines) == 1 + 100 * 6  # header + paths x snapshots


# -------------------------------------------------------------- estimate


def test_estimate_decompose(tmp_path):
    code, rep = run(tmp_path, {
        "command": "estimate", "check": "decompose",
        "scenario": {"name": "sphere-gradient", "params": {"n": 2}},
        "t": 0.2, "dt": 1e-2, "n_paths": 200, "seed": 3,
    })
    assert code == 0
    assert rep["status"] == "passed"
    assert all("tolerance" in r and "provenance" in r for r in rep["rows"])


def test_estimate_not_applicable_exits_zero(tmp_path):
    code, rep = run(tmp_path, {
        "command": "estimate", "check": "bochner",
        "scenario": {"name": "so3-left-invariant"},
        "t": 1.0, "dt": 1e-2, "n_paths": 200, "seed": 0,
    })
    assert code == 0
    assert rep["status"] == "not_applicable"
    assert rep["reason"]


def test_estimate_dead_paths_exit_one(tmp_path):
    code, rep = run(tmp_path, {
        "command": "estimate", "check": "filtered",
        "scenario": {"name": "flat",
                     "params": {"n": 2, "guard_radius": 0.5}},
        "t": 0.5, "dt": 1e-2, "n_paths": 200, "seed": 0,
    })
    assert code == 1
    assert rep["status"] == "failed"


def test_reports_reproducible_across_thread_counts(tmp_path):
    cfg = {"command": "estimate", "check": "moments",
           "scenario": {"name": "sphere-gradient", "params": {"n": 2}},
           "t": 0.3, "dt": 1e-2, "n_paths": 300, "seed": 5}
    reports = []
    for threads in ("1", "4"):
        code, rep = run(tmp_path, cfg, "--threads", threads)
        assert code == 0
        rep.pop("wall_time")
        reports.append(rep)
    assert reports[0] == reports[1]


def test_run_subcommand_dispatches(tmp_path, capsys):
    code, rep = run(tmp_path, {
        "command": "verify", "scenario": {"name": "flat"}, "n_probes": 2,
    }, sub="run")
    assert code == 0
    assert "verify on flat: passed" in capsys.readouterr().out
