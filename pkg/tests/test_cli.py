import io

import numpy as np
import pytest

from ropedyn.cli import main
from ropedyn.harness import DEFAULTS, resolve_config, run_experiment
from ropedyn.io import parse_kv


def summary(path):
    return parse_kv((path / "summary.txt").read_text())


def test_equilibrium_simulation_stays_put(tmp_path):
    assert run_experiment("simulate", {"n_links": 4, "duration": 0.5}, tmp_path) == 0
    traj = np.loadtxt(tmp_path / "trajectory.csv", delimiter=",", skiprows=1)
    assert traj.shape[0] == 51
    pos = traj[:, 1:]  # first column is time
    assert np.max(np.abs(pos - pos[0])) < 1e-9
    assert float(summary(tmp_path)["offset_energy_initial"]) == pytest.approx(0.0, abs=1e-12)
    assert (tmp_path / "reference.hidden.params").exists()


def test_passive_rope_never_settles(tmp_path):
    cfg = {"n_links": 4, "duration": 2.0, "grid_levels": "1.0", "n_displacements": 1}
    assert run_experiment("eval-stabilize", cfg, tmp_path) == 0
    s = summary(tmp_path)
    assert s["policy"] == "passive" and s["stabilization_time"] is None


def test_hidden_file_refused(tmp_path):
    assert run_experiment("simulate", {"n_links": 4, "duration": 0.1}, tmp_path / "sim") == 0
    err = io.StringIO()
    code = run_experiment("train", {"n_links": 4, "params_file": "sim/reference.hidden.params"},
                          tmp_path / "tr", base_dir=tmp_path, stderr=err)
    assert code == 1
    line = err.getvalue().strip()
    assert line.startswith("error=") and "\n" not in line


@pytest.mark.parametrize("cfg", [{"bogus_key": 1}, {"dt": -1.0}, {"n_links": 0}])
def test_bad_config_is_one_error_line(tmp_path, cfg):
    err = io.StringIO()
    assert run_experiment("simulate", cfg, tmp_path, stderr=err) == 1
    assert err.getvalue().startswith("error=") and err.getvalue().count("\n") == 1


def test_missing_input_file(tmp_path):
    err = io.StringIO()
    assert run_experiment("identify", {"n_links": 4}, tmp_path, base_dir=tmp_path, stderr=err) == 1
    assert err.getvalue().startswith("error=missing_file")


def test_seed_flag_overrides_config():
    assert resolve_config("simulate", {"seed": 3}, 9)["seed"] == 9
    assert resolve_config("simulate", {"seed": 3}, None)["seed"] == 3


def test_main_end_to_end(tmp_path, capsys):
    conf = tmp_path / "sim.conf"
    conf.write_text("n_links = 4\nduration = 0.3\nmax_speed = 0.2\n")
    assert main(["simulate", "--config", str(conf), "--out", str(tmp_path / "o"), "--seed", "2"]) == 0
    assert summary(tmp_path / "o")["seed"] == 2
    assert main(["split", "--show-defaults"]) == 0
    shown = capsys.readouterr().out
    assert all(k in shown for k in DEFAULTS["split"])
    assert main(["simulate"]) == 1
