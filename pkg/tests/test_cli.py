import io
import json

import pytest

from elastcert.cli import EXIT_INCONCLUSIVE, EXIT_INVALID, EXIT_OK, main


def _report(out, cmd):
    return json.loads((out / f"report_{cmd}.json").read_text())


def test_certify_affine(tmp_path):
    assert main(["certify", "--gallery", "affine", "--n", "32", "--out", str(tmp_path)]) == EXIT_OK
    rep = _report(tmp_path, "certify")
    assert rep["results"]["verdict"] == "certified_unique"
    assert rep["config"]["problem"]["n"] == 32
    assert rep["config"]["seed"] == 0 and "numerics" in rep["config"]
    assert rep["results"]["local_radius"] == "inf"


def test_certify_torsion_inconclusive(tmp_path):
    code = main(["certify", "--gallery", "torsion", "--a", "4.1", "--n", "24", "--out", str(tmp_path)])
    assert code == EXIT_INCONCLUSIVE
    res = _report(tmp_path, "certify")["results"]
    assert res["verdict"] == "inconclusive" and res["margin"] < 0


def test_negative_resolution(tmp_path, monkeypatch):
    monkeypatch.setattr("sys.stdin", io.StringIO(json.dumps(
        {"command": "certify", "problem": {"gallery": "affine", "n": -8}, "out": str(tmp_path)})))
    assert main(["--config", "-"]) == EXIT_INVALID
    assert not list(tmp_path.glob("report_*.json"))
    assert main(["certify", "--n", "-3", "--out", str(tmp_path)]) == EXIT_INVALID
    assert not list(tmp_path.glob("report_*.json"))


def test_malformed_configs(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["--config", str(bad)]) == EXIT_INVALID
    assert main(["--config", str(tmp_path / "absent.json")]) == EXIT_INVALID
    bad.write_text(json.dumps({"command": "certify", "numerics": {"tol": -1}, "out": str(tmp_path)}))
    assert main(["--config", str(bad)]) == EXIT_INVALID
    bad.write_text(json.dumps({"command": "launch"}))
    assert main(["--config", str(bad)]) == EXIT_INVALID


def test_config_file_with_overrides(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "gallery", "problem": {"gallery": "affine",
                                                              "params": {"A": [[1.0, 0.5], [0.0, 1.0]]}, "n": 8}}))
    assert main(["--config", str(cfg), "--n", "12", "--out", str(tmp_path / "o")]) == EXIT_OK
    rep = _report(tmp_path / "o", "gallery")
    assert rep["config"]["problem"]["n"] == 12
    for name in ("u.bin", "omega.bin", "u.csv", "density.csv"):
        assert (tmp_path / "o" / name).exists()


def test_eigen_command(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "eigen", "problem": {"gallery": "affine", "params": {"A": [[1.0]]}, "n": 64}}))
    assert main(["--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    res = _report(tmp_path, "eigen")["results"]
    assert res["lambda1"] == pytest.approx(9.8696, rel=2e-3)
    assert (tmp_path / "eigenfunction.bin").exists()


def test_relax_solve(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "relax-solve", "problem": {"gallery": "affine",
                                                                  "params": {"A": [[1.0]]}, "n": 7}}))
    assert main(["--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    res = _report(tmp_path, "relax-solve")["results"]
    assert res["converged"] and res["relaxed_energy"] == pytest.approx(0.5, abs=1e-2)
    assert (tmp_path / "trace.csv").exists() and (tmp_path / "planflux.bin").exists()


def test_audit_deterministic(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "duality-audit", "seed": 7, "numerics": {"pairs": 10},
                               "problem": {"gallery": "affine", "params": {"A": [[1.0]]}, "n": 7}}))
    reports = []
    for d in ("a", "b"):
        assert main(["--config", str(cfg), "--out", str(tmp_path / d)]) == EXIT_OK
        rep = _report(tmp_path / d, "duality-audit")
        rep.pop("wall_time")
        rep["config"].pop("out")
        reports.append(json.dumps(rep, sort_keys=True))
    assert reports[0] == reports[1]
    assert json.loads(reports[0])["config"]["seed"] == 7
    assert json.loads(reports[0])["results"]["random"]["violations"] == 0


def test_version(capsys):
    with pytest.raises(SystemExit):
        main(["--version"])
    assert "elastcert" in capsys.readouterr().out
