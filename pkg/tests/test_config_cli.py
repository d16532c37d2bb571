import os

import numpy as np
import pytest

from conftest import bump
from morphenkf import io
from morphenkf.cli import main
from morphenkf.config import ConfigError, RunConfig, load_config, parse_config
from morphenkf.field import GridGeometry, ScalarField, is_invertible

TINY = """\
# small and quick
grid.nx = 33
grid.ny = 33
grid.Lx = 64.0
grid.Ly = 64.0
model.spinup_cycles = 1
model.cycle_len = 30.0
ens.members = 4
reg.M = 2
reg.C1 = 1000.0
reg.C2 = 100.0
reg.max_sweeps = 2
data.shift_x = 4.0
data.shift_y = 2.0
run.cycles = 1
run.seed = 3
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


def test_parse_values_and_comments():
    cfg = parse_config("reg.C1 = 5  # weaker\n\nens.members=7\nfilter.assimilate_fuel = yes\n")
    assert cfg.reg.C1 == 5.0 and cfg.ens.members == 7 and cfg.filter.assimilate_fuel is True
    assert cfg.reg.C2 == RunConfig().reg.C2


@pytest.mark.parametrize("text", ["reg.C9 = 1", "nosuch.key = 1", "ens.members = many",
                                  "filter.assimilate_fuel = maybe", "just words"])
def test_parse_errors(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_text_round_trip():
    cfg = load_config("desk")
    assert parse_config(cfg.to_text()) == cfg


def test_validation():
    with pytest.raises(ConfigError):
        parse_config("ens.members = 1").validate()
    with pytest.raises(ConfigError):
        parse_config("model.dt = 100.0").validate()
    with pytest.raises(ConfigError):
        parse_config("reg.M = 0")


def test_bundled_configs():
    full = load_config("full")
    g = full.grid.geometry()
    assert (g.nx, g.ny, g.Lx, g.Ly) == (250, 250, 500.0, 500.0)
    assert g.hx == pytest.approx(500.0 / 249)
    assert full.ens.members == 50 and full.reg.M == 4
    assert (full.reg.C1, full.reg.C2) == (1e4, 1e3)
    assert (full.filter.sigma_r, full.filter.sigma_T) == (50.0, 5.0)
    assert (full.ens.amp_r, full.ens.amp_T) == (50.0, 5.0)
    assert full.run.cycles == 5 and full.model.cycle_len == 180.0
    desk = load_config("desk")
    assert (desk.grid.nx, desk.grid.Lx, desk.ens.members) == (125, 250.0, 20)


def test_unknown_key_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("reg.C3 = 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.cfg")]) == 2


def test_run_zero_cycles(tiny_cfg, tmp_path):
    out = tmp_path / "run0"
    assert main(["run", "--config", tiny_cfg, "--out", str(out), "--cycles", "0"]) == 0
    assert sorted(os.listdir(out)) == ["config.txt", "cycle_00", "report.txt", "timing.txt"]
    files = sorted(os.listdir(out / "cycle_00"))
    assert files == ["data_w.mkf"] + [f"{p}_{k:03d}.mkf" for p in ("w", "z") for k in range(4)]
    assert (out / "report.txt").read_text() == ""


def test_run_one_cycle(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run1"
    assert main(["run", "--config", tiny_cfg, "--out", str(out), "--members", "3"]) == 0
    assert "cycle=1 " in capsys.readouterr().out
    d = out / "cycle_01"
    for sub in ("analysis", "forecast"):
        lines = (d / sub / "manifest.txt").read_text().splitlines()
        assert len(lines) == 3
    for name in ("data_w.mkf", "data_r_w.mkf", "data_T.mkw", "registration.txt", "diagnostics.txt",
                 "pvalue_analysis_w.mkf", "pvalue_forecast_r_w.csv"):
        assert (d / name).exists()
    g = io.read_field(d / "data_w.mkf").geometry
    T = io.read_warp(d / "data_T.mkw", g)
    assert is_invertible(T)
    assert "cycle=1 " in (out / "report.txt").read_text()
    assert set(line.split()[0] for line in (out / "timing.txt").read_text().splitlines()) >= {"model", "analysis"}


def test_numerical_failure_exits_3(tmp_path):
    path = tmp_path / "wild.cfg"
    path.write_text(TINY + "ens.amp_T = 100000.0\nens.max_tries = 2\n")
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "w")]) == 3


@pytest.fixture
def pair(tmp_path):
    g = GridGeometry(49, 49, 96.0, 96.0)
    u, v = bump(g, 44.0, 48.0, 9.0), bump(g, 52.0, 46.0, 9.0)
    io.write_field(tmp_path / "u.mkf", u)
    io.write_field(tmp_path / "v.mkf", v)
    return u, v, str(tmp_path / "u.mkf"), str(tmp_path / "v.mkf")


def _reg_cfg(tmp_path):
    path = tmp_path / "reg.cfg"
    path.write_text("reg.M = 3\nreg.C1 = 1000.0\nreg.C2 = 100.0\n")
    return str(path)


def test_demo_morph_endpoints(pair, tmp_path, capsys):
    u, v, pu, pv = pair
    out = tmp_path / "m"
    assert main(["demo-morph", pu, pv, "--steps", "2", "--out", str(out), "--config", _reg_cfg(tmp_path)]) == 0
    first = io.read_field(out / "morph_000.mkf")
    last = io.read_field(out / "morph_001.mkf")
    assert np.array_equal(first.values, u.values)
    assert np.abs(last.values - v.values).max() < 0.05 * np.abs(v.values - u.values).max()
    assert "lambda=1 " in capsys.readouterr().out


def test_demo_morph_moves_the_peak_monotonically(pair, tmp_path):
    u, v, pu, pv = pair
    out = tmp_path / "m5"
    assert main(["demo-morph", pu, pv, "--steps", "5", "--out", str(out), "--config", _reg_cfg(tmp_path)]) == 0
    g = u.geometry
    xs = []
    for i in range(5):
        f = io.read_field(out / f"morph_{i:03d}.mkf").values
        xs.append(g.x[np.unravel_index(np.argmax(f), f.shape)[1]])
    assert all(b >= a for a, b in zip(xs, xs[1:])) and xs[-1] > xs[0]


def test_demo_morph_identical_inputs(pair, tmp_path):
    u, _, pu, _ = pair
    out = tmp_path / "same"
    assert main(["demo-morph", pu, pu, "--steps", "3", "--out", str(out)]) == 0
    for i in range(3):
        assert np.array_equal(io.read_field(out / f"morph_{i:03d}.mkf").values, u.values)


def test_demo_morph_needs_two_steps(pair, tmp_path):
    _, _, pu, pv = pair
    assert main(["demo-morph", pu, pv, "--steps", "1", "--out", str(tmp_path / "x")]) == 2


def test_demo_morph_rejects_mismatched_grids(pair, tmp_path):
    _, _, pu, _ = pair
    other = tmp_path / "o.mkf"
    io.write_field(other, ScalarField.constant(GridGeometry(5, 5, 1.0, 1.0), 0.0))
    assert main(["demo-morph", pu, str(other), "--out", str(tmp_path / "x")]) == 2


def test_register_writes_invertible_warp(pair, tmp_path, capsys):
    u, _, pu, pv = pair
    out = tmp_path / "w" / "T.mkw"
    assert main(["register", pu, pv, "--out", str(out), "--config", _reg_cfg(tmp_path)]) == 0
    assert open(out, "rb").read(4) == b"MKW1"
    T = io.read_warp(out, u.geometry)
    assert T.level == 3 and is_invertible(T) and np.abs(T.tx).max() > 0
    assert capsys.readouterr().out.startswith("level=1 sweep=1 ")


def test_diagnose_checkpoint(tiny_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", tiny_cfg, "--out", str(out)]) == 0
    capsys.readouterr()
    ck = out / "cycle_01" / "analysis"
    assert main(["diagnose", str(ck), "--out", str(tmp_path / "diag")]) == 0
    text = capsys.readouterr().out
    assert text.startswith("w: median p=") and "r_w: median p=" in text
    pmap = io.read_field(tmp_path / "diag" / "pvalue_w.mkf")
    assert pmap.values.min() >= 1e-8 and pmap.values.max() <= 1.0


def test_diagnose_missing_checkpoint(tmp_path):
    assert main(["diagnose", str(tmp_path / "nothing")]) == 2
