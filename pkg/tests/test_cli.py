import csv
import json

import numpy as np
import pytest

from htsemi import cli
from htsemi.gft import GridSpec

SMALL_PLANCHEREL = {
    "scenario": "plancherel",
    "seed": 3,
    "grid": {"v_extent": 8.0, "z_extent": 8.0, "n_v": 32, "n_z": 16},
    "frame": {"A": 10},
    "params": {"n_functions": 2, "band": 2},
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg))
    return str(path)


def summary(out):
    return json.loads((out / "summary.json").read_text())


# ---------------------------------------------------------------- list / describe


def test_list_names_every_scenario(capsys):
    assert cli.main(["list"]) == 0
    text = capsys.readouterr().out
    for name in cli.SCENARIOS:
        assert name in text


def test_describe(capsys):
    assert cli.main(["describe", "transport-center"]) == 0
    assert "(2n+d)/2" in capsys.readouterr().out
    with pytest.raises(KeyError):
        cli.describe("nope")
    assert cli.main(["describe", "nope"]) == cli.EXIT_ERROR


# ---------------------------------------------------------------- config errors


@pytest.mark.parametrize(
    "cfg,needle",
    [
        ("{not json", "JSON parse error"),
        ({"scenario": "nope"}, "scenario"),
        ({"scenario": "plancherel", "bogus": 1}, "bogus"),
        ({"scenario": "egorov", "sweeps": {"eps": []}}, "eps"),
        ({"scenario": "egorov", "sweeps": {"eps": [1.5]}}, "eps"),
        ({"scenario": "plancherel", "seed": "x"}, "seed"),
    ],
)
def test_config_errors_exit_1(tmp_path, capsys, cfg, needle):
    out = tmp_path / "out"
    code = cli.run(write(tmp_path, cfg), out=str(out))
    assert code == cli.EXIT_ERROR
    err = capsys.readouterr().err
    reason = json.loads(err.strip().splitlines()[-1])["reason"]
    assert reason["kind"] == "config" and needle in reason["message"]
    s = summary(out)
    assert s["status"] == "error" and s["exit_code"] == 1


def test_missing_config_file(tmp_path):
    assert cli.run(str(tmp_path / "absent.json"), out=str(tmp_path / "o")) == cli.EXIT_ERROR


# ---------------------------------------------------------------- runs


def test_small_plancherel_run(tmp_path, capsys):
    out = tmp_path / "out"
    code = cli.run(write(tmp_path, SMALL_PLANCHEREL), out=str(out))
    assert code == cli.EXIT_OK
    s = summary(out)
    assert s["status"] == "pass" and s["seed"] == 3 and s["within_budget"]
    assert {c["name"] for c in s["clauses"]} == {"plancherel relative error", "round-trip relative L2 error"}
    with open(out / "results.csv") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == cli.CSV_COLUMNS
    assert len(rows) == 1 + 4
    # floats are written round-trippable
    assert all(float(r[8]) <= 1e-6 for r in rows[1:])
    report = (out / "report.txt").read_text()
    assert "PASS" in report and "plancherel" in report
    assert "scenario: plancherel" in capsys.readouterr().out


def test_seed_flag_overrides_config(tmp_path):
    out = tmp_path / "out"
    assert cli.run(write(tmp_path, SMALL_PLANCHEREL), out=str(out), seed=11) == 0
    assert summary(out)["seed"] == 11


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    path = write(tmp_path, SMALL_PLANCHEREL)
    assert cli.run(path, out=str(a)) == 0
    assert cli.run(path, out=str(b)) == 0
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = dict(SMALL_PLANCHEREL, output={"dir": str(tmp_path / "from-config")})
    path = write(tmp_path, cfg)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "from-env"))
    assert cli.run(path) == 0
    assert (tmp_path / "from-env" / "summary.json").exists()
    assert cli.run(path, out=str(tmp_path / "from-flag")) == 0
    assert (tmp_path / "from-flag" / "summary.json").exists()
    monkeypatch.delenv(cli.OUT_ENV)
    assert cli.run(path) == 0
    assert (tmp_path / "from-config" / "summary.json").exists()


def test_fiber_identities_reports_contour_limit(tmp_path):
    # the rho = 1.9 contour cannot reach 1e-8 with 64 nodes; every other clause passes
    out = tmp_path / "out"
    code = cli.run(write(tmp_path, {"scenario": "fiber-identities"}), out=str(out))
    assert code == cli.EXIT_TOLERANCE
    s = summary(out)
    failed = [c["name"] for c in s["clauses"] if not c["passed"]]
    assert failed == ["contour projector rho=1.9"]
    assert s["reason"]["kind"] == "tolerance"


def test_runtime_error_is_reported(tmp_path):
    cfg = {"scenario": "fiber-identities", "params": {"lams": [[0.0]]}}
    out = tmp_path / "out"
    assert cli.run(write(tmp_path, cfg), out=str(out)) == cli.EXIT_ERROR
    s = summary(out)
    assert s["reason"]["kind"] == "runtime" and "traceback" in s["reason"]


def test_main_run_subcommand(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["run", write(tmp_path, SMALL_PLANCHEREL), "--out", str(out), "--threads", "1"]) == 0
    assert summary(out)["threads"] == 1


# ---------------------------------------------------------------- symbol DSL


def test_symbol_dsl_aliases():
    g = GridSpec(8.0, 8.0, 32, 16)
    a = cli.build_symbol(
        {"id": "x", "terms": [{"a": {"type": "gaussian", "v_width": 1.0}, "fiber": {"type": "band_projector", "n": 1}}]}, g
    )
    b = cli.build_symbol(
        {"id": "x", "terms": [{"profile": {"kind": "gaussian", "v_width": 1.0}, "fiber": {"kind": "projector", "n": 1}}]}, g
    )
    lam = np.array([1.0])
    from htsemi.fiber import HermiteFrame
    from htsemi.htype import heisenberg

    fr, grp = HermiteFrame(1, 4), heisenberg(1)
    assert np.array_equal(a.evaluate(5, 2, lam, fr, grp), b.evaluate(5, 2, lam, fr, grp))


def test_symbol_dsl_cutoff_and_errors():
    g = GridSpec(8.0, 8.0, 32, 16)
    s = cli.build_symbol(
        {"id": "c", "cutoff": {"lo": 0.5, "hi": 2.0, "ramp": 0.25}, "terms": [{"fiber": {"kind": "heat", "t": 0.5}}]}, g
    )
    assert s.lam_support == (0.25, 2.25)
    with pytest.raises(cli.ConfigError):
        cli.build_symbol({"id": "bad", "terms": [{"fiber": {"kind": "warp"}}]}, g)
    with pytest.raises(cli.ConfigError):
        cli.build_profile({"kind": "sine"}, g)
