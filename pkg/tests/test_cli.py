import json
import os

import numpy as np
import pytest

import fsem.cli as cli
from fsem.dataset import write_covariate_csv, write_long_csv
from fsem.gp import GPError
from fsem.sim import SimScenario, generate

MODEL = """\
indicator z1 z2 z3
factor eta
covariate x1 scalar
covariate x2 scalar
load z1 eta concurrent anchor
load z2 eta concurrent
load z3 eta concurrent
path eta x1 linear
path eta x2 linear
basis bspline 6
set fit.alpha = 0.01
set fit.max_iter = 4
set data.path = data.csv
set data.covariates = cov.csv
"""


@pytest.fixture
def workdir(tmp_path):
    data, _ = generate(SimScenario.defaults("sim2", N=25), np.random.default_rng([3, 0]))
    with open(tmp_path / "data.csv", "w") as fh:
        write_long_csv(data, fh)
    with open(tmp_path / "cov.csv", "w") as fh:
        write_covariate_csv(data, fh)
    (tmp_path / "model.fsem").write_text(MODEL)
    return tmp_path


def _read_all(d):
    return {name: (d / name).read_bytes() for name in sorted(os.listdir(d))}


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.run(["fit", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--config", "--data", "--covariates", "--out", "--seed", "--alpha", "--threads", "--max-iter"):
        assert flag in out
    with pytest.raises(SystemExit):
        cli.run(["simulate", "--help"])
    out = capsys.readouterr().out
    for flag in ("--scenario", "--reps", "--boot", "--keep-unconverged", "--boot-max-iter"):
        assert flag in out


def test_fit_writes_reports_with_provenance(workdir):
    out = workdir / "out"
    assert cli.run(["fit", "--config", str(workdir / "model.fsem"), "--out", str(out), "--seed", "5"]) == 0
    rep = json.loads((out / "fit_report.json").read_text())
    assert rep["provenance"][0].startswith("fsem ")
    assert rep["provenance"][1].startswith("config_hash ")
    assert rep["provenance"][2] == "seed 5"
    assert rep["iterations"] == 4 and rep["config"]["seed"] == 5
    params = json.loads((out / "params.json").read_text())
    assert set(params["params"]["loadings"]) == {"z1|eta", "z2|eta", "z3|eta"}


def test_fit_is_byte_identical_on_repeat(workdir):
    a, b = workdir / "a", workdir / "b"
    argv = ["fit", "--config", str(workdir / "model.fsem"), "--seed", "2"]
    assert cli.run(argv + ["--out", str(a)]) == 0
    assert cli.run(argv + ["--out", str(b)]) == 0
    assert _read_all(a) == _read_all(b)


def test_flag_overrides_change_the_config_hash(workdir):
    a, b = workdir / "a", workdir / "b"
    argv = ["fit", "--config", str(workdir / "model.fsem"), "--seed", "2"]
    cli.run(argv + ["--out", str(a)])
    cli.run(argv + ["--out", str(b), "--alpha", "0.5"])
    ha = json.loads((a / "fit_report.json").read_text())["provenance"][1]
    hb = json.loads((b / "fit_report.json").read_text())["provenance"][1]
    assert ha != hb


def test_unknown_variable_exits_2(workdir, capsys):
    text = (workdir / "data.csv").read_text().splitlines()
    text.insert(3, "s1,w9,0.5,1.0")
    (workdir / "bad.csv").write_text("\n".join(text) + "\n")
    code = cli.run(["fit", "--config", str(workdir / "model.fsem"), "--data", str(workdir / "bad.csv"),
                    "--out", str(workdir / "o")])
    assert code == 2
    err = capsys.readouterr().err
    assert "w9" in err and "bad.csv:4" in err


def test_model_errors_exit_2(workdir, capsys):
    (workdir / "bad.fsem").write_text(MODEL.replace("load z3 eta concurrent", "load z3 eta sideways"))
    assert cli.run(["fit", "--config", str(workdir / "bad.fsem"), "--out", str(workdir / "o")]) == 2
    assert "bad.fsem:7" in capsys.readouterr().err


def test_missing_output_directory_exits_2(workdir, capsys):
    assert cli.run(["fit", "--config", str(workdir / "model.fsem")]) == 2
    assert "output directory" in capsys.readouterr().err


def test_bad_alpha_is_a_usage_error(workdir):
    with pytest.raises(SystemExit) as exc:
        cli.run(["fit", "--config", str(workdir / "model.fsem"), "--alpha", "lots"])
    assert exc.value.code == 2


def test_numerical_failure_exits_3_with_diagnostics(workdir, monkeypatch, capsys):
    def boom(*args, **kwargs):
        raise GPError("observation covariance not positive definite")

    monkeypatch.setattr(cli, "fit_mcem", boom)
    out = workdir / "o"
    assert cli.run(["fit", "--config", str(workdir / "model.fsem"), "--out", str(out)]) == 3
    diag = json.loads((out / "diagnostics.json").read_text())
    assert "positive definite" in diag["error"]
    assert diag["resolved"]["command"] == "fit"
    assert "diagnostics" in capsys.readouterr().err


def test_gof_from_saved_params(workdir):
    cfg = str(workdir / "model.fsem")
    assert cli.run(["fit", "--config", cfg, "--out", str(workdir / "f")]) == 0
    assert cli.run(["gof", "--config", cfg, "--out", str(workdir / "g"), "--params",
                    str(workdir / "f" / "params.json"), "--grid-size", "7"]) == 0
    lines = (workdir / "g" / "gof.csv").read_text().strip().splitlines()
    assert lines[-2] == "chi2/df,RMSEA,SRMR,CFI,IFI,GFI,TLI"
    assert sum(1 for ln in lines[:-2] if ln[:1].isdigit()) == 7


def test_bands_writes_one_file_per_coefficient(workdir):
    out = workdir / "b"
    code = cli.run(["bands", "--config", str(workdir / "model.fsem"), "--out", str(out), "--boot", "3",
                    "--keep-unconverged", "--boot-max-iter", "2", "--grid-size", "11", "--threads", "1"])
    assert code == 0
    summary = json.loads((out / "bands_summary.json").read_text())
    assert summary["B_used"] == 3
    assert "band_loading_z2_eta.csv" in summary["files"]
    assert "band_gamma_x_eta_x1.csv" in summary["files"]
    text = (out / "band_loading_z2_eta.csv").read_text().splitlines()
    assert text[3] == "grid_t,center,lower,upper" and len(text) == 4 + 11


def test_bands_drop_rule_exits_3(workdir):
    out = workdir / "b"
    code = cli.run(["bands", "--config", str(workdir / "model.fsem"), "--out", str(out), "--boot", "2",
                    "--boot-max-iter", "1", "--threads", "1"])
    assert code == 3
    assert "dropped" in json.loads((out / "diagnostics.json").read_text())["error"]


def test_simulate_writes_table_shaped_report(tmp_path):
    out = tmp_path / "s"
    argv = ["simulate", "--scenario", "sim1", "--n", "12", "--reps", "2", "--max-iter", "2", "--seed", "1",
            "--out", str(out), "--threads", "1"]
    assert cli.run(argv) == 0
    lines = (out / "report.csv").read_text().splitlines()
    assert lines[3] == "table,model,design,N,M,beta,lambda,phi1,nu1,sigma2"
    assert lines[4].startswith("mse,FM(1),R,12,10,")
    reps = json.loads((out / "replicates.json").read_text())
    assert len(reps["replicates"]) == 2
