import csv
import json
import math
import os

import pytest

import subriemann_gibbs.cc_distance as ccd
from subriemann_gibbs.cli import (
    DEFAULTS,
    EXIT_CONFIG,
    EXIT_FAIL,
    EXIT_INCONCLUSIVE,
    EXIT_OK,
    EXIT_SOLVER,
    ConfigError,
    main,
    overall_verdict,
    parse_config,
)


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# config grammar


def test_parse_config_types_and_comments():
    cfg = parse_config("# header\nalpha = 0.5  # inline\nN = 1\noracle = false\nS_grid = 0, 5\nboundary = random\n")
    assert cfg == {"alpha": 0.5, "N": 1, "oracle": False, "S_grid": [0.0, 5.0], "boundary": "random"}


@pytest.mark.parametrize(
    "text,match",
    [("q = 2", "conjugacy"), ("gamma = 1", "unknown key"), ("alpha = 1\nalpha = 2", "duplicate"),
     ("alpha 1", "key = value"), ("N = two", "bad value"), ("boundary = periodic", "one of"),
     ("oracle = yes", "true or false"), ("seed = -1", "64-bit")],
)
def test_parse_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_parse_error_reports_line_number():
    with pytest.raises(ConfigError, match="line 3"):
        parse_config("alpha = 1\n\nbogus = 2\n")


def test_overall_verdict_rule():
    assert overall_verdict([{"verdict": "pass"}, {"verdict": "inconclusive"}]) == "pass"
    assert overall_verdict([{"verdict": "inconclusive"}]) == "inconclusive"
    assert overall_verdict([{"verdict": "pass"}, {"verdict": "fail"}]) == "fail"


# --------------------------------------------------------------------------
# distance


def test_distance_command(tmp_path):
    pts = _write(tmp_path / "pts.csv", "x1,x2,x3\n3,4,0\n0,0,1\n0,0,0\n20,0,0  # outside the oracle box\n")
    out = tmp_path / "out"
    assert main(["distance", pts, "--out", str(out)]) == EXIT_OK
    rows = _read_csv(out / "distance.csv")
    assert [float(r["d"]) for r in rows[:3]] == pytest.approx([5.0, 2 * math.sqrt(math.pi), 0.0])
    assert float(rows[0]["theta"]) == 0.0
    assert float(rows[0]["oracle_d"]) == pytest.approx(5.0, rel=0.05)
    assert rows[3]["oracle_d"] == "nan"
    report = json.loads((out / "distance.json").read_text())
    assert report["command"] == "distance" and report["n_points"] == 4
    assert report["config"]["points"] == os.path.abspath(pts)


def test_distance_empty_file_and_bad_rows(tmp_path):
    empty = _write(tmp_path / "empty.csv", "# nothing\n")
    assert main(["distance", empty, "--out", str(tmp_path)]) == EXIT_OK
    assert _read_csv(tmp_path / "distance.csv") == []
    bad = _write(tmp_path / "bad.csv", "1,2\n")
    assert main(["distance", bad, "--out", str(tmp_path)]) == EXIT_CONFIG
    nan = _write(tmp_path / "nan.csv", "1,2,nan\n")
    assert main(["distance", nan, "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["distance", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["distance", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_distance_solver_failure_exit_code(tmp_path, monkeypatch):
    def broken(pts, d, phi, res, axis):
        d[:] = 1.0
        phi[:] = 0.5
        res[:] = 1e-3
        axis[:] = False

    monkeypatch.setattr(ccd, "_cc_many", broken)
    pts = _write(tmp_path / "pts.csv", "1,0,0.2\n")
    assert main(["distance", pts, "--out", str(tmp_path)]) == EXIT_SOLVER


def test_config_errors_exit_2(tmp_path):
    pts = _write(tmp_path / "pts.csv", "1,0,0\n")
    for text in ("q = 2\n", "unknown = 1\n"):
        cfg = _write(tmp_path / "c.txt", text)
        assert main(["distance", pts, "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    # parses, but the potential spec rejects it
    cfg = _write(tmp_path / "c.txt", "alpha = -1\n")
    assert main(["verify", "ubound", "--config", cfg, "--out", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as info:
        main(["verify", "nonsense"])
    assert info.value.code == EXIT_CONFIG


# --------------------------------------------------------------------------
# verify and sample


def test_verify_eikonal_passes(tmp_path):
    cfg = _write(tmp_path / "c.txt", "eikonal_points = 200\n")
    assert main(["verify", "eikonal", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "verify_eikonal.json").read_text())
    assert rep["verdict"] == "pass" and rep["checks"][0]["max_residual"] <= 1e-4


def test_verify_sweep_product_case(tmp_path):
    cfg = _write(tmp_path / "c.txt", "interaction = general\nJ0 = 0\nside = 3\nn_max = 2\ninner = 8\nouter = 64\n"
                                     "sweep_burnin = 5\n")
    assert main(["verify", "sweep", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rep = json.loads((tmp_path / "verify_sweep.json").read_text())
    assert rep["checks"][0]["product_case"] and rep["checks"][0]["floor_from"] == 1


def test_verify_ubound_fails_without_coupling(tmp_path):
    # with eps = 0 the measure ignores S while W = d^p + d S grows with S
    cfg = _write(tmp_path / "c.txt", "n = 5000\nS_grid = 0, 50\n")
    assert main(["verify", "ubound", "--config", cfg, "--out", str(tmp_path)]) == EXIT_FAIL


def test_verify_all_inconclusive_exit_code(tmp_path, monkeypatch):
    import subriemann_gibbs.cli as cli

    monkeypatch.setitem(cli.SUITE_FUNCS, "eikonal", lambda cfg: [{"name": "x", "verdict": "inconclusive"}])
    assert main(["verify", "eikonal", "--out", str(tmp_path)]) == EXIT_INCONCLUSIVE


def test_rerun_from_report_is_byte_identical(tmp_path):
    cfg = _write(tmp_path / "c.txt", "eikonal_points = 100\nseed = 17\n")
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["verify", "eikonal", "--config", cfg, "--out", str(a)]) == EXIT_OK
    rep = str(a / "verify_eikonal.json")
    assert main(["verify", "eikonal", "--config", rep, "--out", str(b)]) == EXIT_OK
    assert (a / "verify_eikonal.json").read_bytes() == (b / "verify_eikonal.json").read_bytes()
    full = json.loads((a / "verify_eikonal.json").read_text())["config"]
    assert set(full) == set(DEFAULTS) and full["seed"] == 17


def test_seed_flag_overrides_config(tmp_path):
    assert main(["verify", "eikonal", "--seed", "5", "--out", str(tmp_path)]) == EXIT_OK
    assert json.loads((tmp_path / "verify_eikonal.json").read_text())["seed"] == 5


@pytest.mark.parametrize("extra", ["sampler = exact\n", "sampler = mh\nburnin = 500\n",
                                   "sampler = exact\ntheta = 0.3\nepsilon = 0.1\nrho = 1\nS = 2\n"])
def test_sample_site_reproducible(tmp_path, extra):
    cfg = _write(tmp_path / "c.txt", "n = 2000\n" + extra)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["sample", "site", "--config", cfg, "--out", str(a)]) == EXIT_OK
    assert main(["sample", "site", "--config", cfg, "--out", str(b)]) == EXIT_OK
    for name in ("sample_site.csv", "sample_site.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    rows = _read_csv(a / "sample_site.csv")
    assert len(rows) == 2000 and list(rows[0]) == ["x1", "x2", "x3"]
    rep = json.loads((a / "sample_site.json").read_text())
    assert "quadrature_moments" in rep["diagnostics"]


def test_sample_lattice(tmp_path):
    cfg = _write(tmp_path / "c.txt", "side = 2\nreplicas = 2\nsweeps = 20\nsweep_burnin = 5\nthin = 5\n"
                                     "epsilon = 0.1\nrho = 1\n")
    assert main(["sample", "lattice", "--config", cfg, "--out", str(tmp_path)]) == EXIT_OK
    rows = _read_csv(tmp_path / "sample_lattice.csv")
    # 2 replicas x 3 kept sweeps x 4 sites
    assert len(rows) == 24
    assert {(r["site_i"], r["site_j"]) for r in rows} == {("0", "0"), ("0", "1"), ("1", "0"), ("1", "1")}
