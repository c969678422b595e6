import csv

import numpy as np
import pytest
import yaml

from octlk import cli
from octlk.model import ReconstructionResult

PHANTOM_CFG = {
    "system": {"theta_omega_deg": 0.0},
    "sample": {"layers": [{"n": 1.5088, "d_um": 174.0}, {"n": 1.3225, "d_um": 186.0},
                          {"n": 1.5088, "d_um": 173.0}]},
}


def _config(tmp_path, data=PHANTOM_CFG, name="run.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sim")
    cfg = _config(tmp)
    out = str(tmp / "spectrum.csv")
    assert cli.main(["simulate", "--config", cfg, "--out", out]) == cli.EXIT_OK
    return tmp, cfg, out


def test_simulate_writes_full_grid(simulated):
    _, _, out = simulated
    rows = _rows(out)
    assert rows[0] == ["k", "value"]
    assert len(rows) == 1 + 1498


def test_round_trip(simulated, capsys):
    tmp, cfg, spec = simulated
    out = str(tmp / "layers.csv")
    assert cli.main(["reconstruct", "--config", cfg, "--spectrum", spec, "--out", out]) == 0
    rows = _rows(out)
    assert rows[0] == ["j", "n", "d_um", "sign", "residual"]
    n = [float(r[1]) for r in rows[1:]]
    d = [float(r[2]) for r in rows[1:] if r[2]]
    np.testing.assert_allclose(n, [1.5088, 1.3225, 1.5088, 1.0], atol=5e-3)
    np.testing.assert_allclose(d, [174.0, 186.0, 173.0], atol=0.5)
    assert "q0=" in capsys.readouterr().out


def test_noise_is_seeded(tmp_path):
    cfg = _config(tmp_path)
    paths = [str(tmp_path / f"s{i}.csv") for i in range(4)]
    cli.main(["simulate", "--config", cfg, "--out", paths[0], "--noise", "0.05", "--seed", "3"])
    cli.main(["simulate", "--config", cfg, "--out", paths[1], "--noise", "0.05", "--seed", "3"])
    cli.main(["simulate", "--config", cfg, "--out", paths[2], "--noise", "0"])
    cli.main(["simulate", "--config", cfg, "--out", paths[3]])
    a, b, c, d = (open(p).read() for p in paths)
    assert a == b and a != c
    assert c == d


def test_add_noise_bounds(rng):
    v = np.ones(1000)
    noisy = cli.add_noise(v, 0.05, rng)
    assert np.all(np.abs(noisy - 1) <= 0.05)
    np.testing.assert_array_equal(cli.add_noise(v, 0.0, rng), v)


def test_exit_codes(tmp_path, simulated):
    _, cfg, spec = simulated
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert cli.main(["reconstruct", "--config", cfg, "--spectrum", str(empty)]) == cli.EXIT_IO
    bad = _config(tmp_path, {"system": {"wavelength": 1.3}}, "bad.yaml")
    assert cli.main(["simulate", "--config", bad, "--out", str(tmp_path / "x.csv")]) == 1
    with pytest.raises(SystemExit) as exc:
        cli.main(["transmogrify", "--config", cfg])
    assert exc.value.code == cli.EXIT_CONFIG
    short = tmp_path / "short.csv"
    short.write_text("k,value\n4.8,1.0\n")
    assert cli.main(["reconstruct", "--config", cfg, "--spectrum", str(short)]) == cli.EXIT_IO


def test_partial_result_exit(monkeypatch, simulated, tmp_path):
    _, cfg, spec = simulated

    def stub(*args, **kwargs):
        return ReconstructionResult(layers=[(1.5, None)], q0=1.0, residuals=[0.0], signs=[-1],
                                    complete=False, message="step 2: stub")

    monkeypatch.setattr(cli, "reconstruct", stub)
    out = str(tmp_path / "partial.csv")
    assert cli.main(["reconstruct", "--config", cfg, "--spectrum", spec,
                     "--out", out]) == cli.EXIT_PARTIAL
    assert len(_rows(out)) == 2


def test_calibration_flag():
    assert cli._calibration(None) is None
    assert cli._calibration("n1=1.5088") == pytest.approx(1.5088)
    for text in ("n2=1.4", "n1=", "n1=abc"):
        with pytest.raises(cli.CliError):
            cli._calibration(text)


def test_grid_layer_must_exist(tmp_path):
    data = dict(PHANTOM_CFG, grid={"layer": 5})
    with pytest.raises(cli.CliError):
        cli.load_config(_config(tmp_path, data))


def test_map_round_trip(tmp_path):
    grid = cli.shape_map(20)
    path = tmp_path / "map.csv"
    cli.write_map(path, grid)
    np.testing.assert_array_equal(cli.read_map(path), grid)
    path.write_text("l,m,n_hat\n1,1,1.4\n2,2,1.3\n")
    with pytest.raises(cli.CliError):
        cli.read_map(path)


def test_builtin_map_values():
    grid = cli.shape_map(20)
    assert grid.shape == (20, 20)
    assert set(np.unique(grid)) == {1.10, 1.37, 1.40, 1.45}


def test_worker_count(monkeypatch):
    monkeypatch.setenv("OCTLK_THREADS", "1")
    assert cli.worker_count() == 1
    monkeypatch.setenv("OCTLK_THREADS", "many")
    with pytest.raises(cli.CliError):
        cli.worker_count()


def test_grid_command_small_map(tmp_path):
    data = {
        "system": {"theta_omega_deg": 0.0},
        "sample": {"layers": [{"n": 1.5088, "d_um": 174.0}, {"n": 1.37, "d_um": 186.0}]},
        "solver": {"d_resolution_um": 0.25},
    }
    cfg = _config(tmp_path, data)
    path = tmp_path / "map.csv"
    cli.write_map(path, np.array([[1.40]]))
    out = tmp_path / "grid.csv"
    code = cli.main(["grid", "--config", cfg, "--map", str(path), "--out", str(out)])
    assert code == cli.EXIT_OK
    rows = _rows(out)
    assert rows[0] == ["l", "m", "n2_hat", "n2_rec", "err"]
    assert abs(float(rows[1][4])) < 0.02


def test_scan_command(simulated, tmp_path):
    _, cfg, spec = simulated
    out = tmp_path / "scan.csv"
    code = cli.main(["scan", "--config", cfg, "--spectrum", spec, "--out", str(out),
                     "--step", "1", "--n-range", "1.4", "1.6", "5"])
    assert code == cli.EXIT_OK
    rows = _rows(out)
    assert rows[0] == ["n", "d", "J_full", "J_star"]
    assert len(rows) == 6
    assert cli.main(["scan", "--config", cfg, "--spectrum", spec, "--out", str(out),
                     "--step", "2", "--n-range", "1.2", "1.4", "3"]) == cli.EXIT_CONFIG
