import csv

import numpy as np
import pytest

from sechyp import cli, vectorfield as vf


def _ini(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


LIN = """
[run]
seed = 1
[system]
name = linear
A = [[-1.0, 0.0], [0.0, -2.0]]
[lyapunov]
x0 = [1.0, 1.0]
T = 50.0
transient = 0.0
"""

QUOTIENT = """
[run]
seed = 3
[system]
name = geolorenz-quotient
[measures]
n_initials = 50
T = 2000.0
burn_in = 0.0
"""


def test_lyapunov_on_linear_field(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["lyapunov", "--config", _ini(tmp_path, LIN), "--out", str(out)]) == 0
    rows = list(csv.reader((out / "lyapunov.csv").open()))
    assert rows[0] == ["index", "exponent"]
    np.testing.assert_allclose([float(r[1]) for r in rows[1:]], [-1.0, -2.0], atol=1e-6)
    assert (out / cli.MANIFEST).is_file()


def test_config_errors_exit_2(tmp_path, capsys):
    bad = _ini(tmp_path, "[run]\nseed = 3\n[system]\nname = nosuch\n[simulate]\n")
    assert cli.main(["simulate", "--config", bad, "--out", str(tmp_path / "o")]) == 2
    unknown = _ini(tmp_path, LIN + "\n[bogus]\nx = 1\n", "u.ini")
    assert cli.main(["lyapunov", "--config", unknown, "--out", str(tmp_path / "u")]) == 2
    assert not (tmp_path / "u").exists()
    assert cli.main(["lyapunov", "--config", str(tmp_path / "missing.ini")]) == 2
    noseed = _ini(tmp_path, "[system]\nname = lorenz\n", "n.ini")
    assert cli.main(["simulate", "--config", noseed, "--out", str(tmp_path / "n")]) == 2
    assert "config error" in capsys.readouterr().err


def test_numerical_failure_exits_3(tmp_path, capsys):
    blow = _ini(tmp_path, """
[run]
seed = 0
[system]
name = linear
A = [[30.0, 0.0], [0.0, 30.0]]
[simulate]
x0 = [1.0, 1.0]
T = 2.0
""")
    assert cli.main(["simulate", "--config", blow, "--out", str(tmp_path / "o")]) == 3
    assert "BlowUp" in capsys.readouterr().err


def test_bad_thread_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SECHYP_THREADS", "many")
    assert cli.main(["lyapunov", "--config", _ini(tmp_path, LIN), "--out",
                     str(tmp_path / "o")]) == 2


def test_replay_identical_and_mismatch(tmp_path, capsys):
    out = tmp_path / "q"
    assert cli.main(["measures", "--config", _ini(tmp_path, QUOTIENT), "--out", str(out)]) == 0
    man = str(out / cli.MANIFEST)
    assert cli.main(["replay", man]) == 0
    p = out / "clusters.csv"
    lines = p.read_text().splitlines()
    lines[3] = lines[3] + "0"
    p.write_text("\n".join(lines) + "\n")
    capsys.readouterr()
    assert cli.main(["replay", man]) == 4
    assert "clusters.csv: first difference at line 4" in capsys.readouterr().err
    p.unlink()
    assert cli.main(["replay", man]) == 2
    assert cli.main(["replay", str(tmp_path / "nowhere" / cli.MANIFEST)]) == 2


def test_threads_do_not_change_outputs(tmp_path):
    cfg = _ini(tmp_path, QUOTIENT)
    a, b = tmp_path / "t1", tmp_path / "t8"
    assert cli.main(["measures", "--config", cfg, "--out", str(a), "--threads", "1"]) == 0
    assert cli.main(["measures", "--config", cfg, "--out", str(b), "--threads", "8"]) == 0
    for f in sorted(a.glob("*.csv")):
        assert f.read_bytes() == (b / f.name).read_bytes()
    man_a = (a / cli.MANIFEST).read_text().splitlines()
    assert "threads = 1" in man_a


def test_list_shows_registered_linear_system(tmp_path, capsys):
    cfg = _ini(tmp_path, "[register.saddle2]\nA = [[1.0, 0.0], [0.0, -1.0]]\n")
    assert cli.main(["list", "--config", cfg]) == 0
    out = capsys.readouterr().out
    for name in ("lorenz", "bowen", "double-lorenz", "geolorenz-quotient", "saddle2"):
        assert name in out
    vf.REGISTRY.pop("saddle2", None)
    vf.DEFAULTS.pop("saddle2", None)


def test_registered_system_runs(tmp_path):
    cfg = _ini(tmp_path, """
[run]
seed = 0
[register.slowsink]
A = [[-0.5, 0.0], [0.0, -0.25]]
[system]
name = slowsink
[simulate]
x0 = [1.0, 1.0]
T = 2.0
out_dt = 1.0
""")
    out = tmp_path / "o"
    try:
        assert cli.main(["simulate", "--config", cfg, "--out", str(out)]) == 0
    finally:
        vf.REGISTRY.pop("slowsink", None)
        vf.DEFAULTS.pop("slowsink", None)
    rows = list(csv.reader((out / "trajectory.csv").open()))
    last = [float(v) for v in rows[-1]]
    assert last[0] == 2.0
    np.testing.assert_allclose(last[1:3], [np.exp(-1.0), np.exp(-0.5)], rtol=1e-8)


@pytest.mark.parametrize("exp,body", [
    ("simulate", "[system]\nname = lorenz\n[simulate]\nT = 1.0\n"),
    ("entropy", "[system]\nname = geolorenz-quotient\n[entropy]\nn = 20000\nk_max = 4\n"
                "n_cloud = 2000\nn_max = 5\n"),
    ("cudisk", "[system]\nname = geolorenz-quotient\n[cudisk]\nT1 = 3.0\nlambda1 = 0.0625\n"
               "lambda2 = 0.17\na1 = 0.9\n"),
])
def test_experiment_smoke(tmp_path, exp, body):
    cfg = _ini(tmp_path, "[run]\nseed = 0\n" + body)
    out = tmp_path / exp
    assert cli.main([exp, "--config", cfg, "--out", str(out)]) == 0
    assert cli.main(["replay", str(out / cli.MANIFEST)]) == 0
