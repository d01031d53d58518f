import csv
import json
import math

import numpy as np
import pytest

from pode.cli import RunConfig, fmt, main, parse_range, parse_theta
from pode.errors import ConfigError


def _rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_parse_helpers():
    assert parse_theta("a=1, b=2.5e-1") == {"a": 1.0, "b": 0.25}
    assert parse_range("0:1:3") == (0.0, 1.0, 3)
    with pytest.raises(ConfigError):
        parse_range("0:1")
    with pytest.raises(ConfigError):
        parse_theta("a")
    assert float(fmt(0.1 + 0.2)) == 0.1 + 0.2


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"model": "linear", "dt": 0.25}))
    cfg = RunConfig.from_sources(str(path), {"dt": 0.5, "seed": None})
    assert cfg.model == "linear" and cfg.dt == 0.5
    path.write_text(json.dumps({"modle": "linear"}))
    with pytest.raises(ConfigError):
        RunConfig.from_sources(str(path), {})


def test_simulate_then_loglik_matches_oracle(tmp_path, capsys):
    data = tmp_path / "y.csv"
    assert main(["simulate", "--model", "linear", "--seed", "4", "--out", str(data)]) == 0
    rows = _rows(data)
    assert rows[0] == ["t", "y1", "y2"] and len(rows) == 6
    out = tmp_path / "ll.json"
    capsys.readouterr()
    code = main(["loglik", "--model", "linear", "--engine", "dalton", "--dt", "0.25",
                 "--data", str(data), "--oracle", "--out", str(out)])
    assert code == 0
    doc = json.loads(out.read_text())
    assert abs(doc["difference"]) < 1e-8
    assert capsys.readouterr().out.splitlines()[0] == fmt(doc["loglik"])


def test_diverged_theta_reports_minus_infinity(tmp_path, capsys):
    out = tmp_path / "ll.json"
    code = main(["loglik", "--model", "lorenz63", "--engine", "dalton", "--dt", "0.005",
                 "--theta", "alpha=1e6", "--out", str(out)])
    assert code == 3
    doc = json.loads(out.read_text())
    assert doc["loglik"] == -math.inf and doc["error"]["code"] == "E_DIVERGED"
    assert "E_DIVERGED" in capsys.readouterr().err


def test_config_errors_exit_2(capsys):
    assert main(["loglik", "--model", "fn", "--engine", "fenrir", "--dt", "0.15"]) == 2
    assert "E_GRID" in capsys.readouterr().err
    assert main(["loglik", "--model", "seirah", "--engine", "fenrir"]) == 2
    assert "E_UNSUPPORTED" in capsys.readouterr().err
    assert main(["slice", "--model", "linear", "--param", "nope", "--range", "0:1:2"]) == 2


def test_slice_threads_agree(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    common = ["slice", "--model", "linear", "--engine", "dalton", "--dt", "0.25",
              "--param", "k1", "--range", "0.3:0.7:3"]
    assert main(common + ["--threads", "1", "--out", str(a)]) == 0
    assert main(common + ["--threads", "2", "--out", str(b)]) == 0
    assert _rows(a) == _rows(b)
    assert _rows(a)[0] == ["k1", "loglik"] and len(_rows(a)) == 4


def test_fit_and_solve(tmp_path):
    fit = tmp_path / "fit.json"
    assert main(["fit", "--model", "linear", "--engine", "dalton", "--dt", "0.25",
                 "--out", str(fit)]) == 0
    doc = json.loads(fit.read_text())
    assert doc["converged"] and set(doc["theta_hat"]) == {"k1", "k2", "x1_0", "x2_0"}
    sol = tmp_path / "sol.csv"
    assert main(["solve", "--model", "linear", "--engine", "datafree", "--dt", "0.05",
                 "--out", str(sol)]) == 0
    rows = _rows(sol)
    assert rows[0][:3] == ["t", "x1_mean", "x2_mean"]
    assert len(rows) == 42
