import csv
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import pytest

from fgsh.checks import check_symplectic
from fgsh.cli import ConfigError, load_config, main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(path, text):
    path.write_text(text)
    return path


MC_SMALL = """
[model]
name = "spin_boson"
omega = 1.0
c = 1.0
epsilon = 0.1
delta = 0.5

[run]
backend = "mc"
z0 = [-1.0, 0.0]
t = 0.5
seed = 11
workers = 1

[ensemble]
N = 2000
dt = 1e-2
grid_points = 64
"""


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def error_record(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_list_models(capsys):
    assert main(["list-models"]) == 0
    assert "spin_boson" in capsys.readouterr().out.split()


def test_help_documents_columns(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    out = capsys.readouterr().out
    for col in ("re_u0", "se_u1", "pop_deviation", "delta, k, backend, converged, s"):
        assert col in out


def test_missing_model_name(tmp_path, capsys):
    cfg = write(tmp_path / "bad.toml", MC_SMALL.replace('name = "spin_boson"\n', ""))
    assert main(["run", str(cfg), "-o", str(tmp_path / "out")]) == 2
    rec = error_record(capsys)
    assert rec["error"] == "config"
    assert rec["key"] == "model.name"
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize("edit,key", [
    (lambda s: s.replace("seed = 11", "seed = 11\nsede = 3"), "run.sede"),
    (lambda s: s.replace("omega = 1.0", "omgea = 1.0"), "model.omgea"),
    (lambda s: s + "\n[plotting]\ncolor = 1\n", "plotting"),
    (lambda s: s.replace('backend = "mc"', 'backend = "fft"'), "run.backend"),
    (lambda s: s.replace("t = 0.5\n", ""), "run.t"),
    (lambda s: s.replace("epsilon = 0.1\n", ""), "model.epsilon"),
])
def test_config_rejections(tmp_path, capsys, edit, key):
    cfg = write(tmp_path / "bad.toml", edit(MC_SMALL))
    assert main(["run", str(cfg)]) == 2
    assert error_record(capsys)["key"] == key


def test_invalid_toml_and_missing_file(tmp_path, capsys):
    with pytest.raises(ConfigError):
        load_config(write(tmp_path / "x.toml", "[model\nname="))
    assert main(["run", str(tmp_path / "absent.toml")]) == 2
    assert error_record(capsys)["error"] == "config"


def test_module_error_exit_code(tmp_path, capsys):
    text = (CONFIGS / "stationary.toml").read_text().replace("z0 = [-1.0, 2.0]", "z0 = [-1.0, 0.0]")
    cfg = write(tmp_path / "s.toml", text)
    assert main(["run", str(cfg), "-o", str(tmp_path / "out")]) == 1
    assert error_record(capsys)["error"] == "NoCrossingError"


def test_mc_outputs_are_reproducible(tmp_path):
    cfg = write(tmp_path / "mc.toml", MC_SMALL)
    for name in ("a", "b"):
        assert main(["run", str(cfg), "-o", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "wavefunction.csv").read_bytes()
    assert a == (tmp_path / "b" / "wavefunction.csv").read_bytes()
    rows = read_csv(tmp_path / "a" / "wavefunction.csv")
    assert rows[0] == ["x0", "re_u0", "im_u0", "re_u1", "im_u1", "se_u0", "se_u1"]
    assert len(rows) == 65
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 11
    assert man["config"]["ensemble"]["N"] == 2000
    assert man["summary"]["C_N"] == pytest.approx(2.6714, rel=1e-4)
    assert {"numpy", "scipy", "python"} <= set(man["versions"])
    assert man["wall_time"] > 0


def test_output_dir_env_override(tmp_path, monkeypatch):
    cfg = write(tmp_path / "mc.toml", MC_SMALL)
    monkeypatch.setenv("FGSH_OUT", str(tmp_path / "env"))
    assert main(["run", str(cfg), "-o", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "env" / "wavefunction.csv").exists()
    assert not (tmp_path / "flag").exists()


def _run_config(name, tmp_path, monkeypatch):
    out = tmp_path / name
    monkeypatch.setenv("FGSH_OUT", str(out))
    assert main(["run", str(CONFIGS / f"{name}.toml")]) == 0
    return out, json.loads((out / "manifest.json").read_text())


def test_marcus_config(tmp_path, monkeypatch):
    out, man = _run_config("marcus", tmp_path, monkeypatch)
    rows = read_csv(out / "sweep.csv")
    assert rows[0] == ["delta", "k", "backend", "converged", "s"]
    assert len(rows) == 6 and rows[-1][0] == "fit"
    assert all(r[3] == "true" for r in rows[1:])
    assert float(rows[-1][4]) == pytest.approx(2.0, abs=0.1)
    assert man["summary"]["exponent"] == pytest.approx(float(rows[-1][4]))


def test_strong_config(tmp_path, monkeypatch):
    out, man = _run_config("strong", tmp_path, monkeypatch)
    rows = read_csv(out / "strong.csv")
    assert rows[0] == ["delta", "E", "pop0", "pop_deviation", "mass_drift"]
    assert [float(r[0]) for r in rows[1:]] == [5.0, 10.0, 20.0, 40.0]
    assert man["summary"]["E_decreasing"]


def test_stationary_config(tmp_path, monkeypatch):
    out, man = _run_config("stationary", tmp_path, monkeypatch)
    rep = json.loads((out / "stationary.json").read_text())
    assert rep["t1_star"] == pytest.approx(0.5235987755982988, abs=1e-10)
    assert man["summary"]["leading_order_rate"] > 0


def test_single_hop_config(tmp_path, monkeypatch):
    out, man = _run_config("single_hop", tmp_path, monkeypatch)
    rows = read_csv(out / "u1.csv")
    assert rows[0] == ["x0", "re_u1", "im_u1"]
    assert man["summary"]["converged"]
    assert man["summary"]["k"] == pytest.approx(5.4138e-7, rel=0.1)


def test_mc_config(tmp_path, monkeypatch):
    out, man = _run_config("mc", tmp_path, monkeypatch)
    assert not man["summary"]["grid_warning"]
    assert man["summary"]["dropped"] == 0
    p0, e0 = man["summary"]["population0"]
    p1, e1 = man["summary"]["population1"]
    assert abs(p0 + p1 - 1.0) < 3 * (e0 + e1) + 0.1


def test_spectral_config_without_sweep(tmp_path, monkeypatch):
    text = (CONFIGS / "marcus.toml").read_text().replace("delta_list = [1e-3, 2e-3, 4e-3, 8e-3]", "")
    text = text.replace("epsilon = 0.05", "epsilon = 0.05\ndelta = 0.01").replace("points = 1024", "points = 512")
    cfg = write(tmp_path / "spec.toml", text)
    assert main(["run", str(cfg), "-o", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "populations.csv")
    assert rows[0] == ["t", "pop0", "pop1"]
    assert float(rows[1][1]) == pytest.approx(1.0)
    assert float(rows[-1][0]) == pytest.approx(2.0)


def test_verify_subprocess_is_fast_and_seed_independent(identity_suite):
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "fgsh.cli", "verify", "--seed", "3"],
                          capture_output=True, text=True, env={**os.environ, "PYTHONWARNINGS": "ignore"})
    elapsed = time.perf_counter() - start
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert elapsed < 120
    lines = proc.stdout.strip().splitlines()
    assert all(line.startswith("[PASS]") for line in lines[:-1])
    # items without randomness print identical lines for any seed
    seeded = ("symplectic identity", "Poisson parity")
    here = [r.line() for r in identity_suite[0] if r.name not in seeded]
    there = [line for line in lines[:-1] if not any(line.startswith(f"[PASS] {s}") for s in seeded)]
    assert here == there


def test_verify_fails_with_coarse_step():
    assert not check_symplectic(dt=1e-2).passed


@pytest.mark.slow
def test_verify_exit_code_with_coarse_step(capsys):
    assert main(["verify", "--dt", "1e-2"]) == 1
    out = capsys.readouterr().out
    assert "[FAIL] symplectic identity" in out
