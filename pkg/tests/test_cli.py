import os

import numpy as np
import pytest

from carleman_lab import cli
from carleman_lab.errors import NumericError
from carleman_lab.fieldio import read_field, read_report, write_field


def write_cfg(tmp_path, body, name="c.toml"):
    p = tmp_path / name
    p.write_text('output = "out"\n' + body)
    return str(p)


SMALL_GRID = "[grid]\nnr = 8\nntheta = 16\nnt = 16\n"


def test_forward_zero_source(tmp_path, capsys):
    c = write_cfg(tmp_path, SMALL_GRID + '[system]\npreset = "desk"\n[source]\nkind = "zero"\n')
    assert cli.main(["forward", c, "--csv"]) == 0
    z = read_field(tmp_path / "out" / "zeta.fld")
    assert z.shape == (2, 17, 16) and np.all(z == 0)
    assert (tmp_path / "out" / "y.csv").exists()
    assert "|zeta|_L2(Sigma1)=0.000000e+00" in capsys.readouterr().out


def test_forward_manufactured_error(tmp_path, capsys):
    c = write_cfg(tmp_path, "[grid]\nnr = 16\nntheta = 32\nnt = 32\n"
                  '[system]\npreset = "manufactured-dirichlet"\n[source]\nkind = "manufactured"\n')
    assert cli.main(["forward", c]) == 0
    out = capsys.readouterr().out
    err = float(out.split("l2_error=")[1].split()[0])
    # convergence-table value at this resolution
    assert err == pytest.approx(2.602e-3, rel=0.01)


def test_observe_matches_forward(tmp_path):
    c = write_cfg(tmp_path, SMALL_GRID + '[system]\npreset = "desk"\n[source]\nkind = "bumps"\n')
    assert cli.main(["forward", c]) == 0
    z1 = read_field(tmp_path / "out" / "zeta.fld")
    dest = str(tmp_path / "z2.fld")
    assert cli.main(["observe", c, "--out", dest]) == 0
    assert np.array_equal(read_field(dest), z1)


def test_missing_config(tmp_path, capsys):
    assert cli.main(["forward", str(tmp_path / "nope.toml")]) == 2
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_hypothesis_violation_rejected(tmp_path, capsys):
    body = SMALL_GRID + """[system]
preset = "custom"
n = 2
diffusion = [[[1, 0], [0, 1]], [[1, 0], [0, 1]]]
coupling = [[0, 0.5], [0, 0]]
mu = 1.0
[source]
kind = "bumps"
"""
    c = write_cfg(tmp_path, body)
    for cmd in ("forward", "verify-l2", "reconstruct"):
        assert cli.main([cmd, c]) == 2
    assert not (tmp_path / "out").exists()
    assert cli.main(["check-hypotheses", c]) == 2
    assert "H3: FAIL" in capsys.readouterr().out


def test_check_hypotheses_ok(tmp_path, capsys):
    c = write_cfg(tmp_path, SMALL_GRID + '[system]\npreset = "desk"\n[source]\nkind = "bumps"\n')
    assert cli.main(["check-hypotheses", c]) == 0
    out = capsys.readouterr().out
    assert all(f"H{k}: pass" in out for k in range(1, 6))


def test_negative_source_file_rejected(tmp_path):
    g = -np.ones((2, 17, 9, 16))
    write_field(tmp_path / "g.fld", g)
    c = write_cfg(tmp_path, SMALL_GRID + '[system]\npreset = "desk"\n[source]\nkind = "file"\npath = "g.fld"\n')
    assert cli.main(["forward", c]) == 2


VERIFY = """[grid]
nr = 8
ntheta = 16
nt = 32
[system]
preset = "manufactured-robin"
[source]
kind = "manufactured"
[carleman]
lam = [1.5, 2.0, 2.5]
s = [20.0, 40.0, 80.0]
final_time = "auto"
"""


def test_verify_rows_and_determinism(tmp_path, monkeypatch):
    c = write_cfg(tmp_path, VERIFY)
    assert cli.main(["verify-l2", c]) == 0
    p = tmp_path / "out" / "verify_l2.csv"
    text = p.read_text()
    assert text.startswith("# schema=1\n")
    rows = read_report(p)
    assert len(rows) == 9
    assert [(r["lam"], r["s"]) for r in rows] == [(a, b) for a in ("1.5", "2", "2.5") for b in ("20", "40", "80")]
    assert all(r["unconverged"] == "0" for r in rows)
    monkeypatch.setenv("CARLEMAN_THREADS", "3")
    assert cli.main(["verify-l2", c]) == 0
    assert p.read_text() == text


def test_unconverged_flag(tmp_path):
    c = write_cfg(tmp_path, VERIFY.replace('final_time = "auto"\n', "").replace("[1.5, 2.0, 2.5]", "[2.0]"))
    assert cli.main(["verify-l2", c]) == 4
    rows = read_report(tmp_path / "out" / "verify_l2.csv")
    assert rows and all(r["unconverged"] == "1" for r in rows)


def test_sweep(tmp_path):
    c = write_cfg(tmp_path, VERIFY.replace("[1.5, 2.0, 2.5]", "[2.0]") + "q = [2.0, 4.0]\n")
    assert cli.main(["sweep", c]) == 0
    rows = read_report(tmp_path / "out" / "sweep.csv")
    assert [r["kind"] for r in rows].count("l2") == 3 and [r["kind"] for r in rows].count("lq") == 6


RECON = """[grid]
nr = 16
ntheta = 32
nt = 64
[system]
preset = "desk"
[source]
kind = "basis"
samples = 2
[inverse]
rho = [1e-6, 1e-8]
noise = [0.0, 0.01, 0.02]
"""


def test_reconstruct_rows(tmp_path):
    c = write_cfg(tmp_path, RECON)
    assert cli.main(["reconstruct", c]) == 0
    rows = read_report(tmp_path / "out" / "reconstruct.csv")
    assert len(rows) == 12
    clean = [r for r in rows if float(r["noise"]) == 0 and float(r["rho"]) == 1e-8]
    assert len(clean) == 2 and all(float(r["relative_error"]) <= 0.05 for r in clean)
    assert all(r["unconverged"] == "0" for r in rows)


def test_reconstruct_zero_data(tmp_path):
    c = write_cfg(tmp_path, RECON.replace('kind = "basis"\nsamples = 2', 'kind = "zero"'))
    assert cli.main(["reconstruct", c]) == 0
    rows = read_report(tmp_path / "out" / "reconstruct.csv")
    assert all(float(r["g_hat_norm"]) == 0 for r in rows)


def test_numeric_anomaly_exit(tmp_path, monkeypatch):
    c = write_cfg(tmp_path, SMALL_GRID + '[system]\npreset = "desk"\n[source]\nkind = "bumps"\n')

    def boom(self, *a, **k):
        raise NumericError("non-finite solution at step 3")

    monkeypatch.setattr(cli.Problem, "solve", boom)
    assert cli.main(["forward", c]) == 3
    assert not (tmp_path / "out").exists()


def test_bad_thread_env(tmp_path, monkeypatch):
    c = write_cfg(tmp_path, SMALL_GRID)
    monkeypatch.setenv("CARLEMAN_THREADS", "many")
    assert cli.main(["forward", c]) == 2


def test_shipped_configs_parse():
    from carleman_lab.config import load_config

    root = os.path.join(os.path.dirname(__file__), "..", "configs")
    for name in sorted(os.listdir(root)):
        load_config(os.path.join(root, name))
