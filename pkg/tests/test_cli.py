import json
import os

import numpy as np
import pytest

from casecohort.cli import main

FIX_T3_CSV = """id,entry,exit,status,stratum,x
A,0,1,1,1,1
B,0,2,1,1,0
C,0,3,0,1,1
"""

SCHEMA_T3 = '{"covariates": ["x"]}'


def write_t3(tmp_path):
    path = tmp_path / "t3.csv"
    path.write_text(FIX_T3_CSV)
    return str(path)


def read_table(path):
    with open(path) as fh:
        header = fh.readline().rstrip("\n").split("\t")
        rows = [dict(zip(header, line.rstrip("\n").split("\t")))
                for line in fh]
    return rows


def test_fit_full_cohort_fix_t3(tmp_path):
    out = tmp_path / "out"
    rc = main(["fit", "--input", write_t3(tmp_path), "--schema", SCHEMA_T3,
               "--regime", "full-cohort", "--risk-interval", "0,2",
               "--risk-profile", "0", "--out", str(out)])
    assert rc == 0
    beta_rows = read_table(out / "beta.tsv")
    assert float(beta_rows[0]["estimate"]) == pytest.approx(-0.5 * np.log(2),
                                                            abs=1e-8)
    risk_rows = read_table(out / "pure_risk.tsv")
    assert float(risk_rows[0]["estimate"]) == pytest.approx(
        1 - np.exp(-1), abs=1e-8)
    hz_rows = read_table(out / "baseline_hazard.tsv")
    assert float(hz_rows[0]["increment"]) == pytest.approx(
        1 / (np.sqrt(2) + 1), abs=1e-8)
    # every emitted number re-parses to the full precision of the estimate
    summary = json.loads((out / "summary.json").read_text())
    assert summary["converged"] is True
    assert float(beta_rows[0]["estimate"]) == summary["beta"][0]


def test_fit_design_regime(tmp_path):
    csv = (
        "id,entry,exit,status,stratum,x,sub\n"
        + "\n".join(
            f"s{i},0,{t},{d},1,{x},{sub}"
            for i, (t, d, x, sub) in enumerate([
                (1.0, 1, 1.0, 0), (2.0, 1, 0.0, 1), (2.5, 0, 1.0, 1),
                (3.0, 0, 0.5, 0), (3.5, 0, -0.5, 1), (4.0, 0, 0.2, 0),
                (4.5, 0, -1.0, 1), (5.0, 0, 0.8, 0)]))
        + "\n")
    path = tmp_path / "cc.csv"
    path.write_text(csv)
    out = tmp_path / "out"
    schema = '{"covariates": ["x"], "phase2": "sub"}'
    rc = main(["fit", "--input", str(path), "--schema", schema,
               "--regime", "design", "--out", str(out)])
    assert rc == 0
    rows = read_table(out / "beta.tsv")
    assert len(rows) == 1
    assert float(rows[0]["se"]) > 0


def test_config_error_on_missing_proxies(tmp_path):
    out = tmp_path / "out"
    rc = main(["fit", "--input", write_t3(tmp_path), "--schema", SCHEMA_T3,
               "--regime", "calibrated", "--risk-interval", "0,2",
               "--out", str(out)])
    assert rc == 2


def test_config_error_on_missing_file(tmp_path):
    rc = main(["fit", "--input", str(tmp_path / "nope.csv"),
               "--schema", SCHEMA_T3, "--out", str(tmp_path / "o")])
    assert rc == 2


def test_numeric_failure_exit_code(tmp_path):
    # dropping subject C makes the likelihood monotone: exit code 3
    path = tmp_path / "mono.csv"
    path.write_text("id,entry,exit,status,stratum,x\n"
                    "A,0,1,1,1,1\nB,0,2,1,1,0\n")
    rc = main(["fit", "--input", str(path), "--schema", SCHEMA_T3,
               "--regime", "full-cohort", "--out", str(tmp_path / "o")])
    assert rc == 3


def test_three_phase_known_probs_label(tmp_path):
    csv_lines = ["id,entry,exit,status,stratum,x,sub,p3,p3prob"]
    rng = np.random.default_rng(0)
    for i in range(40):
        t = round(float(rng.uniform(0.5, 8.0)), 3)
        d = int(rng.random() < 0.3)
        x = round(float(rng.normal()), 3)
        sub = int(rng.random() < 0.5)
        obs = int((d or sub) and rng.random() < 0.9)
        csv_lines.append(f"s{i},0,{t},{d},1,{x},{sub},{obs},0.9")
    path = tmp_path / "p3.csv"
    path.write_text("\n".join(csv_lines) + "\n")
    out = tmp_path / "out"
    schema = ('{"covariates": ["x"], "phase2": "sub", "phase3": "p3", '
              '"phase3_prob": "p3prob"}')
    rc = main(["fit", "--input", str(path), "--schema", schema,
               "--regime", "three-phase", "--phase3-known-probs",
               "--out", str(out)])
    assert rc == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["variance_method"] == "collapsed two-phase"
    # estimated-weight path labels differently
    out2 = tmp_path / "out2"
    rc = main(["fit", "--input", str(path), "--schema", schema,
               "--regime", "three-phase", "--out", str(out2)])
    assert rc == 0
    summary2 = json.loads((out2 / "summary.json").read_text())
    assert summary2["variance_method"] == "three-phase estimated weights"


def test_simulate_deterministic_outputs(tmp_path):
    args = ["simulate", "--n", "600", "--p-event", "0.05", "--K", "2",
            "--replicates", "3", "--seed", "7", "--regimes", "Cohort,SCC"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(args + ["--out", str(out1)]) == 0
    assert main(args + ["--out", str(out2)]) == 0
    for name in ("scenario_summary.tsv", "scenario_summary.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_simulate_unknown_regime(tmp_path, capsys):
    rc = main(["simulate", "--regimes", "Bogus", "--replicates", "1",
               "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "valid:" in capsys.readouterr().err


def test_simulate_long_flag_sets_replicates(tmp_path, monkeypatch):
    import casecohort.cli as cli_mod
    seen = {}

    def fake_run_scenario(cfg, n_jobs=1):
        seen["replicates"] = cfg.replicates

        class S:
            cells = {}
            failures = {}
            replicates_used = {}

            def table_rows(self):
                return []
        return S()

    monkeypatch.setattr(cli_mod, "run_scenario", fake_run_scenario)
    rc = main(["simulate", "--long", "--out", str(tmp_path / "o")])
    assert rc == 0
    assert seen["replicates"] == 5000


def test_calibrate_command(tmp_path):
    rng = np.random.default_rng(1)
    lines = ["id,entry,exit,status,stratum,x,p,sub"]
    for i in range(50):
        x = float(rng.normal())
        t = round(float(rng.exponential(3.0)) + 0.1, 4)
        d = int(rng.random() < 0.25)
        sub = int(rng.random() < 0.4)
        lines.append(f"s{i},0,{t},{d},1,{x if (d or sub) else ''},"
                     f"{round(x + float(rng.normal(0, .4)), 4)},{sub}")
    path = tmp_path / "cal.csv"
    path.write_text("\n".join(lines) + "\n")
    out = tmp_path / "out"
    schema = ('{"phase2_covariates": ["x"], "proxies": ["p"], '
              '"phase2": "sub"}')
    rc = main(["calibrate", "--input", str(path), "--schema", schema,
               "--risk-interval", "0,5", "--impute-with", "p",
               "--out", str(out)])
    assert rc == 0
    eta = json.loads((out / "eta.json").read_text())
    assert eta["max_constraint_residual"] < 1e-8
    rows = read_table(out / "calibrated_weights.tsv")
    assert len(rows) == 50


def test_inputs_not_mutated(tmp_path):
    path = write_t3(tmp_path)
    before = open(path, "rb").read()
    main(["fit", "--input", path, "--schema", SCHEMA_T3,
          "--out", str(tmp_path / "o")])
    assert open(path, "rb").read() == before
