"""Config parsing, CSV/manifest output, exit codes, replay determinism."""

import csv
import hashlib
import json

import numpy as np
import pytest
from click.testing import CliRunner

from pathcurv import cli


def _r2_config(out, paths=500):
    return (
        "experiment = r2\n"
        "model = euclidean:n=1,kf=0\n"
        "functions = linear:t=1,coef=2\n"
        "paths = %d\n"
        "seed = 3\n"
        "output = %s\n" % (paths, out))


def _read_table(path):
    comments, rows = [], []
    with open(path, newline="") as fh:
        for record in csv.reader(line for line in fh
                                 if not line.startswith("#")):
            rows.append(record)
    with open(path) as fh:
        comments = [line.rstrip("\r\n") for line in fh
                    if line.startswith("#")]
    return comments, rows[0], rows[1:]


def test_parse_config_collects_every_error():
    text = (
        "experiment = bogus\n"       # 1 unknown experiment
        "model = euclidean:n=1,kf=0\n"
        "nonsense line\n"            # 3 syntax
        "wibble = 3\n"               # 4 unknown key
        "seed = 1\n"
        "seed = 2\n"                 # 6 duplicate
        "z =\n"                      # 7 empty value
        "paths = -5\n"               # 8 type error
        "kappa = -1\n")              # 9 type error
    cfg, errors = cli.parse_config(text)
    assert cfg is None
    kinds = sorted((e.line, e.kind) for e in errors)
    assert (3, "syntax-error") in kinds
    assert (4, "unknown-key") in kinds
    assert (6, "duplicate-key") in kinds
    assert (7, "bad-value") in kinds
    assert (8, "type-error") in kinds
    assert (9, "type-error") in kinds
    assert (1, "bad-value") in kinds
    assert any(e.line == 0 and e.kind == "missing-required" for e in errors)
    dup = [e for e in errors if e.kind == "duplicate-key"][0]
    assert "line 5" in dup.message
    assert str(dup).startswith("line 6: duplicate-key:")


def test_parse_config_model_constraints():
    base = "output = /tmp/x.csv\n"
    cfg, errors = cli.parse_config(
        "experiment = r2\nmodel = cone:l=3\nfunctions = linear:t=1\n" + base)
    assert cfg is None
    assert any("smooth model" in e.message for e in errors)

    cfg, errors = cli.parse_config(
        "experiment = cone-holonomy\nmodel = euclidean:n=2,kf=0\n" + base)
    assert any("cone model" in e.message for e in errors)

    cfg, errors = cli.parse_config(
        "experiment = girsanov\nmodel = euclidean:n=1,kf=0\nT = 1\n" + base)
    assert any("weighted euclidean" in e.message for e in errors)

    cfg, errors = cli.parse_config(
        "experiment = r45\nmodel = euclidean:n=1,kf=0\n"
        "functions = linear:t=1\n" + base)
    assert any(e.kind == "missing-required" and "'times'" in e.message
               for e in errors)

    cfg, errors = cli.parse_config(
        "experiment = r2\nmodel = euclidean:n=1,kf=0\n"
        "functions = linear:t=1;junk\n" + base)
    assert any("functions[1]" in e.message for e in errors)


def test_parse_config_point_validation():
    base = ("experiment = r2\nmodel = sphere2:r=1,substeps=8\n"
            "functions = linear:t=0.5\noutput = /tmp/x.csv\n")
    cfg, errors = cli.parse_config(base + "start = 0 0 1.0000001\n")
    assert not errors
    assert np.linalg.norm(cfg["start"]) == pytest.approx(1.0, abs=1e-12)
    cfg, errors = cli.parse_config(base + "start = 0 0 2\n")
    assert any("sphere" in e.message for e in errors)
    cfg, errors = cli.parse_config(base + "start = 0 1\n")
    assert any("3 coordinates" in e.message for e in errors)


def test_parse_config_success_values(tmp_path):
    cfg, errors = cli.parse_config(_r2_config(tmp_path / "o.csv"))
    assert errors == []
    assert cfg["_space"].kind == "euclidean"
    assert cfg["_functions"][0].times == (1.0,)
    assert cfg["seed"] == 3 and cfg["paths"] == 500


def test_verify_writes_table_and_manifest(tmp_path):
    out = tmp_path / "r2.csv"
    conf = tmp_path / "r2.conf"
    conf.write_text(_r2_config(out))
    result = CliRunner().invoke(cli.main, ["verify", str(conf)])
    assert result.exit_code == 0, result.output
    comments, header, rows = _read_table(out)
    assert tuple(header) == cli.VERDICT_COLUMNS
    assert comments[0] == "# pathcurv verdict table"
    assert any("functions = linear:t=1,coef=2" in c for c in comments)
    by_ineq = {r[0]: r for r in rows}
    fwd = by_ineq["parallel-gradient"]
    cols = dict(zip(header, fwd))
    assert float(cols["lhs"]) == 2.0
    assert float(cols["margin"]) == 0.0
    assert cols["verdict"] == "pass"
    assert cols["equality"] == "1"
    assert cols["n_paths"] == "500"

    with open(out, "rb") as fh:
        raw = fh.read()
    assert raw.startswith(b"# pathcurv verdict table\r\n")

    manifest = json.loads((tmp_path / "r2.csv.manifest.json").read_text())
    assert manifest["tool"] == "pathcurv"
    assert manifest["experiment"] == "r2"
    assert manifest["config"] == _r2_config(out)
    assert manifest["exit_code"] == 0
    assert manifest["outputs"][0]["sha256"] == \
        hashlib.sha256(raw).hexdigest()


def test_verify_output_override(tmp_path):
    conf = tmp_path / "r2.conf"
    conf.write_text(_r2_config(tmp_path / "ignored.csv"))
    target = tmp_path / "elsewhere" / "table.csv"
    result = CliRunner().invoke(
        cli.main, ["verify", str(conf), "--output", str(target)])
    assert result.exit_code == 0, result.output
    assert target.exists()
    assert (tmp_path / "elsewhere" / "table.csv.manifest.json").exists()
    assert not (tmp_path / "ignored.csv").exists()


def test_config_errors_exit_2(tmp_path):
    conf = tmp_path / "bad.conf"
    conf.write_text("experiment = r2\nwibble = 1\n")
    result = CliRunner().invoke(cli.main, ["verify", str(conf)])
    assert result.exit_code == 2
    assert "config error, line 2: unknown-key" in result.output


def test_run_errors_exit_2(tmp_path):
    out = tmp_path / "r45.csv"
    conf = tmp_path / "r45.conf"
    conf.write_text(
        "experiment = r45\nmodel = euclidean:n=1,kf=0\n"
        "functions = twopoint:t1=0.5,t2=1\ntimes = 1\n"
        "paths = 50\ninner = 50\noutput = %s\n" % out)
    result = CliRunner().invoke(cli.main, ["verify", str(conf)])
    assert result.exit_code == 2
    assert "run error: ValueError" in result.output
    assert not out.exists()


def test_all_inconclusive_exits_3(tmp_path):
    """A strict inequality sitting at equality cannot resolve: exit 3.

    The dimensional bound is exactly saturated by a flat quadratic, so the
    single verdict row lands within the noise band without a predicted
    equality flag.
    """
    out = tmp_path / "dim.csv"
    conf = tmp_path / "dim.conf"
    conf.write_text(
        "experiment = dimensional\nmodel = euclidean:n=1,kf=0\n"
        "functions = quad:t=1\nt = 1\npaths = 2000\nseed = 1\n"
        "output = %s\n" % out)
    result = CliRunner().invoke(cli.main, ["verify", str(conf)])
    assert result.exit_code == 3, result.output
    _, header, rows = _read_table(out)
    assert len(rows) == 1
    assert rows[0][header.index("verdict")] == "inconclusive"


def test_worker_count_does_not_change_bytes(tmp_path):
    text = _r2_config(tmp_path / "w1.csv", paths=4200)
    code1, man1 = cli.run_config_text(text, 1, echo=False)
    code6, man6 = cli.run_config_text(text, 6,
                                      output_override=str(tmp_path / "w6.csv"),
                                      echo=False)
    assert code1 == code6 == 0
    b1 = (tmp_path / "w1.csv").read_bytes()
    b6 = (tmp_path / "w6.csv").read_bytes()
    assert b1 == b6
    assert man1["outputs"][0]["sha256"] == man6["outputs"][0]["sha256"]


def test_replay_matches_across_workers(tmp_path):
    out = tmp_path / "r2.csv"
    conf = tmp_path / "r2.conf"
    conf.write_text(_r2_config(out))
    runner = CliRunner()
    assert runner.invoke(cli.main, ["verify", str(conf), "--workers", "1"]
                         ).exit_code == 0
    manifest = str(out) + ".manifest.json"
    result = runner.invoke(cli.main, ["replay", manifest, "--workers", "4"])
    assert result.exit_code == 0, result.output
    assert "replay match" in result.output
    assert (tmp_path / "r2.csv.replay").read_bytes() == out.read_bytes()


def test_replay_detects_tampering(tmp_path):
    out = tmp_path / "r2.csv"
    conf = tmp_path / "r2.conf"
    conf.write_text(_r2_config(out))
    runner = CliRunner()
    assert runner.invoke(cli.main, ["verify", str(conf)]).exit_code == 0
    mpath = tmp_path / "r2.csv.manifest.json"
    record = json.loads(mpath.read_text())
    record["outputs"][0]["sha256"] = "0" * 64
    mpath.write_text(json.dumps(record))
    result = runner.invoke(cli.main, ["replay", str(mpath)])
    assert result.exit_code == 2
    assert "MISMATCH" in result.output


def test_suite_runs_everything_and_reports_worst(tmp_path):
    good_out = tmp_path / "good.csv"
    (tmp_path / "a_good.conf").write_text(_r2_config(good_out, paths=200))
    (tmp_path / "b_broken.conf").write_text("experiment = r2\nwibble = 1\n")
    result = CliRunner().invoke(cli.main, ["suite", str(tmp_path)])
    assert result.exit_code == 2
    assert good_out.exists()
    assert "a_good.conf -> exit 0" in result.output
    assert "b_broken.conf -> exit 2" in result.output


def test_suite_all_green_exits_0(tmp_path):
    (tmp_path / "one.conf").write_text(_r2_config(tmp_path / "one.csv", 200))
    result = CliRunner().invoke(cli.main, ["suite", str(tmp_path)])
    assert result.exit_code == 0


def test_sample_trace_layout(tmp_path):
    out = tmp_path / "trace.csv"
    result = CliRunner().invoke(cli.main, [
        "sample", "--model", "euclidean:n=2,kf=0", "-T", "1.0",
        "--steps", "4", "--paths", "3", "--output", str(out)])
    assert result.exit_code == 0, result.output
    comments, header, rows = _read_table(out)
    assert header == ["path", "k", "t", "x0", "x1"]
    assert len(rows) == 3 * 5
    assert rows[0][:3] == ["0", "0", "0.0"]
    assert comments[0] == "# pathcurv trace table"

    bad = CliRunner().invoke(cli.main, [
        "sample", "--model", "nosuch:n=1", "--output", str(out)])
    assert bad.exit_code == 2


def test_cone_parallelogram_defect_table(tmp_path):
    out = tmp_path / "quad.csv"
    conf = tmp_path / "quad.conf"
    conf.write_text(
        "experiment = cone-parallelogram\nmodel = cone:l=%s\n"
        "x0 = 1 0.1\nx1 = 1 1.2\noutput = %s\n" % (repr(np.pi), out))
    result = CliRunner().invoke(cli.main, ["verify", str(conf)])
    assert result.exit_code == 0, result.output
    comments, header, rows = _read_table(out)
    assert tuple(header) == cli.DEFECT_COLUMNS
    assert comments[0] == "# pathcurv defect table"
    assert len(rows) > 0


def test_cone_holonomy_config(tmp_path):
    out = tmp_path / "holo.csv"
    conf = tmp_path / "holo.conf"
    conf.write_text(
        "experiment = cone-holonomy\nmodel = cone:l=%s\nloops = 2\n"
        "output = %s\n" % (repr(np.pi), out))
    result = CliRunner().invoke(cli.main, ["verify", str(conf)])
    assert result.exit_code == 0, result.output
    _, header, rows = _read_table(out)
    assert len(rows) == 2
    for row in rows:
        cols = dict(zip(header, row))
        assert cols["verdict"] == "pass"
        assert float(cols["margin"]) > 0


def test_cone_br_probe_default_endpoints_clear_apex(tmp_path):
    # on a wide cone 0.3 * l would exceed the angular cut; the default
    # endpoint must cap the separation so the probe still runs
    out = tmp_path / "br.csv"
    conf = tmp_path / "br.conf"
    conf.write_text(
        "experiment = cone-br-probe\nmodel = cone:l=%s\n"
        "functions = linear:t=1\ns = 0.5\nlevels = 4\noutput = %s\n"
        % (repr(4 * np.pi), out))
    result = CliRunner().invoke(cli.main, ["verify", str(conf)])
    assert result.exit_code in (0, 3), result.output
    _, header, rows = _read_table(out)
    assert any("parallel-slope" in row for row in rows)
