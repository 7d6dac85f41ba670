import json

import numpy as np
import pytest

from ttias.cli import (
    BENCH_FIELDS, ExperimentConfig, emit_plots, expand_matrix, load_config, main, read_coefficients,
    read_vtk, run_assemble, run_benchmark, run_forward, run_reconstruct, source_centres, true_field,
    write_vtk,
)
from ttias.errors import ConfigError, SolverError

TINY = dict(seed=3, n_basis=[8, 8], N_t=5, sigma=1e-3, max_iter=12, i_s=4, variant="global")


def tiny(**kw):
    return ExperimentConfig(**dict(TINY, **kw)).validate()


def test_config_validation():
    with pytest.raises(ConfigError) as e:
        ExperimentConfig().validate()
    assert e.value.path == "seed"
    for bad, path in [(dict(tol=0.0), "tol"), (dict(variant="mixed"), "variant"),
                      (dict(solver="lu"), "solver"), (dict(N_t=0), "N_t"), (dict(r2=2.0), "r2"),
                      (dict(n_basis=[4, 4]), "n_basis"), (dict(variant="local", r2=1.0), "r2"),
                      (dict(geometry="teapot"), "geometry")]:
        with pytest.raises(ConfigError) as e:
            tiny(**bad)
        assert e.value.path == path
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"seed": 1, "colour": "red"})


def test_config_round_trip(tmp_path):
    cfg = tiny()
    assert ExperimentConfig.from_dict(cfg.to_dict()).hash() == cfg.hash()
    assert tiny(seed=4).hash() != cfg.hash()
    (tmp_path / "c.toml").write_text('[experiment]\nseed = 3\nn_basis = [8, 8]\nN_t = 5\nsigma = 0.001\n'
                                     'max_iter = 12\ni_s = 4\nvariant = "global"\n')
    assert load_config(tmp_path / "c.toml").hash() == cfg.hash()
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json").hash() == cfg.hash()


def test_true_field():
    u = true_field((32, 32), 4)
    assert np.count_nonzero(u) == 4 and u.max() == 1.0
    assert len(set(source_centres((32, 32), 4))) == 4
    wide = true_field((32, 32), 4, width=6.0)
    assert np.count_nonzero(wide) > 4


def test_vtk_round_trip(tmp_path, rng):
    dims = (3, 4, 2)
    pts = rng.standard_normal((24, 3))
    vals = rng.standard_normal(24)
    write_vtk(tmp_path / "f.vtk", pts, dims, vals)
    P, d, V = read_vtk(tmp_path / "f.vtk")
    assert d == dims
    np.testing.assert_array_equal(V, vals)
    np.testing.assert_array_equal(P, pts)


def test_assemble_info():
    info = run_assemble(tiny())
    assert info["dofs"] == 36 and info["interior_shape"] == [6, 6]


def test_reconstruct_artifacts_and_determinism(tmp_path):
    cfg = tiny()
    a = run_reconstruct(cfg, tmp_path / "a")
    b = run_reconstruct(cfg, tmp_path / "b")
    for name in ("true.csv", "observation.csv", "reconstruction.csv", "trace.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert a["content_hash"] == b["content_hash"]
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    # the manifest alone reproduces the run
    c = run_reconstruct(ExperimentConfig.from_dict(man["config"]), tmp_path / "c")
    assert c["content_hash"] == a["content_hash"]
    u = read_coefficients(tmp_path / "a" / "reconstruction.csv")
    np.testing.assert_array_equal(u, a["state"].u)
    rows = (tmp_path / "a" / "trace.csv").read_text().splitlines()
    assert len(rows) == a["iterations"] + 1


def test_noiseless_easy_cell(tmp_path):
    cfg = tiny(n_basis=[6, 6], sigma=0.0, n_sources=1, variant="plain", max_iter=50,
               cgls_iter=200, cgls_tol=1e-12)
    man = run_reconstruct(cfg, tmp_path)
    assert man["converged"] and man["iterations"] <= 5
    assert man["support_match"] and man["residual"] < 1e-4


def test_plots(tmp_path):
    man = run_reconstruct(tiny(), tmp_path)
    names = emit_plots(tmp_path)
    assert set(names) == {"nonzeros.dat", "inner_iterations.dat", "heatmap.dat"}
    nz = np.loadtxt(tmp_path / "nonzeros.dat", ndmin=2)
    assert nz.shape[0] == man["iterations"]
    np.testing.assert_array_equal(nz[:, 2], (nz[:, 0] > TINY["i_s"]).astype(float))
    heat = np.loadtxt(tmp_path / "heatmap.dat")
    _, _, V = read_vtk(tmp_path / "reconstruction.vtk")
    assert heat[:, 2].min() == V.min() and heat[:, 2].max() == V.max()
    with pytest.raises(FileNotFoundError):
        emit_plots(tmp_path / "nothing")


def test_plots_3d_slice(tmp_path):
    cfg = tiny(geometry="quarter_pipe", n_basis=[5, 6, 7], max_iter=3)
    man = run_reconstruct(cfg, tmp_path)
    emit_plots(tmp_path)
    heat = np.loadtxt(tmp_path / "heatmap.dat")
    mid = man["state"].u.reshape(3, 4, 5)[:, :, 2]
    np.testing.assert_array_equal(heat[:, 2], mid.ravel())


def test_forward_artifacts(tmp_path):
    man = run_forward(tiny(), tmp_path)
    assert {"true.vtk", "observation.vtk", "true.csv", "observation.csv"} <= set(man["artifacts"])


def test_benchmark(tmp_path):
    cells = expand_matrix({"base": dict(TINY, max_iter=4),
                           "grid": {"r2": [-1.0, 0.5], "solver": ["full-cgls"]}})
    assert len(cells) == 2
    rows = run_benchmark(cells, tmp_path)
    assert [r["status"] for r in rows] == ["ok", "ok"]
    run_benchmark(cells[:1], tmp_path)
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert lines[0].split(",") == BENCH_FIELDS
    assert len(lines) == 4  # append-only, one header
    assert lines[1].split(",")[0] == cells[0].hash()


@pytest.fixture
def broken_tt(monkeypatch):
    """Make every TT-CGLS inner solve fail; the full-matrix path is untouched."""
    from ttias import ias

    orig = ias.InverseProblem.solve

    def solve(self, theta, u_prev=None):
        if self.solver == "tt-cgls":
            raise SolverError("injected inner-solve failure")
        return orig(self, theta, u_prev)

    monkeypatch.setattr(ias.InverseProblem, "solve", solve)


def test_benchmark_records_failures(tmp_path, broken_tt):
    bad = tiny(solver="tt-cgls", max_iter=2)
    rows = run_benchmark([bad, tiny(max_iter=2)], tmp_path)
    assert rows[0]["status"].startswith("failed") and rows[1]["status"] == "ok"


def test_exit_codes(tmp_path, capsys, broken_tt):
    args = ["--seed", "3", "--n-basis", "8", "8", "--N-t", "5", "--max-iter", "3"]
    assert main(["reconstruct", *args, "--out", str(tmp_path / "ok")]) == 0
    assert "IAS iterations" in capsys.readouterr().out
    assert main(["reconstruct", "--n-basis", "8", "8", "--out", str(tmp_path / "x")]) == 2
    assert "seed" in capsys.readouterr().err
    assert main(["reconstruct", *args, "--solver", "tt-cgls", "--out", str(tmp_path / "fail")]) == 3
    # partial artifacts survive a solver failure
    man = json.loads((tmp_path / "fail" / "manifest.json").read_text())
    assert man["status"] == "solver-failure"
    assert (tmp_path / "fail" / "true.vtk").exists()
    assert main(["plots", str(tmp_path / "ok")]) == 0
    assert main(["assemble", "--seed", "1", "--n-basis", "6", "6"]) == 0


def test_solver_failure_raises(tmp_path, broken_tt):
    with pytest.raises(SolverError):
        run_reconstruct(tiny(solver="tt-cgls", max_iter=2), tmp_path)


def test_rank_cap_is_not_fatal(tmp_path):
    man = run_reconstruct(tiny(solver="tt-cgls", rmax=1, matvec_eps=1e-12, max_iter=2), tmp_path)
    assert man["status"] == "ok" and man["iterations"] == 2
