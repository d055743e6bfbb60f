import json
import math

import numpy as np
import pytest

from tala.app.cli import EXIT_CONFIG, EXIT_OK, EXIT_SOLVER, main
from tala.app.config import ConfigError, RunConfig, parse_list
from tala.app.io import (
    CheckpointError, CsvLog, load_checkpoint, mesh_hash, read_checkpoint_meta, read_csv, read_vtk_point_data,
    save_checkpoint, write_vtk,
)
from tala.app.runs import fit_constant, fit_slope, manufactured_run
from tala.energy import TimeState
from tala.femcore import Discretisation, FieldFunction

SMALL = ["--set", "solver.l_max=1", "--set", "solver.l_eta=1", "--set", "solver.l_min=0"]


def _simulate(tmp_path, name, *extra):
    out = tmp_path / name
    argv = ["simulate", "--output", str(out), "--no-figures", *SMALL, "--set", "time.tau_max=2e-4", *extra]
    return main(argv), out


# ---------------------------------------------------------------- config

def test_config_round_trip():
    cfg = RunConfig().updated({"solver": {"omega": "0.4", "uzawa": "adjoint"}, "time": {"tau_first": "none"},
                               "mesh": {"blending": "false"}})
    again = RunConfig.loads(cfg.dumps())
    assert again == cfg
    assert again.solver.omega == 0.4 and again.mesh.blending is False and again.time.tau_first is None


@pytest.mark.parametrize("text", [
    "[bogus]\nx = 1\n",
    "[solver]\nomega = fast\n",
    "[solver]\nnot_a_key = 1\n",
    "[run]\nthreads = 0\n",
    "[run]\nmode = dance\n",
    "[solver]\nl_min = 3\nl_eta = 2\nl_max = 2\n",
    "[physics]\neta_base = 0:-1\n",
    "[bench]\nschur = nothing\n",
    "not an ini file",
])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        RunConfig.loads(text)


def test_physical_params_follow_config():
    cfg = RunConfig().updated({"physics": {"rayleigh": "1e5", "shear_heating": "false"}})
    p = cfg.physical_params()
    assert p.ra == 1e5 and not p.shear_heating
    with pytest.raises(ConfigError):
        RunConfig().updated({"physics": {"d": "-1"}}).reference_constants()


def test_parse_list():
    assert parse_list("8, 16;32") == [8.0, 16.0, 32.0]
    assert parse_list("3,4", int) == [3, 4]


# ------------------------------------------------------------------- CLI

def test_cli_print_config(capsys):
    assert main(["simulate", "--print-config", "--set", "solver.omega=0.5", "--threads", "2"]) == EXIT_OK
    cfg = RunConfig.loads(capsys.readouterr().out)
    assert cfg.solver.omega == 0.5 and cfg.run.threads == 2 and cfg.run.mode == "simulate"


def test_cli_config_errors(tmp_path, capsys):
    assert main(["simulate", "--threads", "0", "--print-config"]) == EXIT_CONFIG
    assert main(["simulate", "--set", "solver.omega"]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert main(["solver-bench", "--resume", str(tmp_path / "x.npz"), "--output", str(tmp_path)]) == EXIT_CONFIG
    with pytest.raises(SystemExit) as exc:
        main(["no-such-mode"])
    assert exc.value.code == EXIT_CONFIG
    rc, _ = _simulate(tmp_path, "r", "--resume", str(tmp_path / "missing.npz"))
    assert rc == EXIT_CONFIG


def test_cli_config_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[solver]\nomega = 0.25\n[run]\nseed = 7\n")
    from tala.app.cli import build_parser, load_config
    args = build_parser().parse_args(["simulate", "--config", str(path), "--seed", "9"])
    cfg = load_config(args)
    assert cfg.solver.omega == 0.25 and cfg.run.seed == 9


def test_cli_solver_failure_exit_code(tmp_path):
    rc, out = _simulate(tmp_path, "fail", "--set", "solver.max_outer=1", "--set", "solver.tol_up=1e-14",
                        "--set", "time.max_steps=2")
    assert rc == EXIT_SOLVER
    meta, _ = read_checkpoint_meta(out / "checkpoint.npz")
    assert "failed" in meta["extra"]


def test_cli_simulate_writes_outputs(tmp_path, capsys):
    rc, out = _simulate(tmp_path, "sim", "--set", "time.max_steps=2", "--set", "run.checkpoint_every=1")
    assert rc == EXIT_OK
    text = capsys.readouterr().out
    assert "Ra" in text and "vrms" in text
    rows = read_csv(out / "timeseries.csv")
    assert [int(r["step"]) for r in rows] == [1, 2]
    assert all(float(r["vrms"]) > 0 for r in rows)
    data = read_vtk_point_data(out / "fields_00002.vtk")
    assert {"T", "T_d", "u", "eta", "p"} <= set(data)
    assert RunConfig.load(out / "config.ini").run.mode == "simulate"


def test_restart_reproduces_uninterrupted_run(tmp_path):
    rc, full = _simulate(tmp_path, "full", "--set", "time.max_steps=4")
    assert rc == EXIT_OK
    rc, part = _simulate(tmp_path, "part", "--set", "time.max_steps=2")
    assert rc == EXIT_OK
    rc, _ = _simulate(tmp_path, "part", "--set", "time.max_steps=4", "--resume", str(part / "checkpoint.npz"))
    assert rc == EXIT_OK
    meta_a, a = read_checkpoint_meta(full / "checkpoint.npz")
    meta_b, b = read_checkpoint_meta(part / "checkpoint.npz")
    assert meta_a["step"] == meta_b["step"] == 4 and meta_a["t"] == meta_b["t"]
    assert meta_a["mesh_hash"] == meta_b["mesh_hash"]
    assert set(a) == set(b) == {"T", "T_old", "u", "u_old", "p"}
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])
    assert [r["step"] for r in read_csv(part / "timeseries.csv")] == ["1", "2", "3", "4"]


def test_zero_rayleigh_run_stays_quiescent(tmp_path):
    rc, out = _simulate(tmp_path, "quiet", "--set", "physics.rayleigh=0", "--set", "time.max_steps=2")
    assert rc == EXIT_OK
    _, arrays = read_checkpoint_meta(out / "checkpoint.npz")
    assert np.abs(arrays["u"]).max() == 0.0


def test_cli_solver_bench_small(tmp_path, capsys):
    out = tmp_path / "bench"
    rc = main(["solver-bench", "--output", str(out), "--no-figures", "--set", "bench.level=1",
               "--set", "bench.uzawa=symmetric", "--set", "bench.schur=vbfbt, mass", *SMALL])
    assert rc == EXIT_OK
    summary = read_csv(out / "solver_bench_summary.csv")
    assert [r["schur"] for r in summary] == ["vbfbt", "mass"]
    assert summary[0]["status"] == "converged"


def test_cli_convergence_small(tmp_path, capsys):
    out = tmp_path / "conv"
    rc = main(["convergence-test", "--output", str(out), "--no-figures", "--set", "convergence.levels=1",
               "--set", "convergence.n_steps=2, 4"])
    assert rc == EXIT_OK
    rows = read_csv(out / "convergence.csv")
    assert [int(r["n_steps"]) for r in rows] == [2, 4]
    assert (out / "convergence_fit.csv").exists()


# -------------------------------------------------------------------- io

def test_csv_log_appends(tmp_path):
    path = tmp_path / "log.csv"
    with CsvLog(path, ["a", "b"]) as log:
        log.row([1, 0.5])
    with CsvLog(path, ["a", "b"], append=True) as log:
        log.write(a=2, b=0.25)
    assert read_csv(path) == [{"a": "1", "b": "0.5"}, {"a": "2", "b": "0.25"}]


def test_vtk_round_trip(tmp_path, disc1):
    space = disc1.space("P2", 1)
    rng = np.random.default_rng(0)
    s, v = rng.standard_normal(space.dim), rng.standard_normal((space.dim, 2))
    path = write_vtk(tmp_path / "f.vtk", space, {"s": s, "v": v})
    back = read_vtk_point_data(path)
    np.testing.assert_array_equal(back["s"], s)
    np.testing.assert_array_equal(back["v"], v)
    assert "CELL_TYPES" in path.read_text()
    with pytest.raises(ValueError):
        write_vtk(tmp_path / "g.vtk", space, {"bad": np.zeros(3)})


def _state(disc, level):
    rng = np.random.default_rng(2)
    T = FieldFunction(disc.space("P2", level), rng.standard_normal(disc.space("P2", level).dim))
    u = FieldFunction(disc.space("P2vec", level), rng.standard_normal(disc.space("P2vec", level).dim))
    return TimeState(step=3, t=0.125, tau=0.01, T=T, T_old=T.copy(), u=u, u_old=None, p=None)


def test_checkpoint_round_trip_and_rejections(tmp_path, disc1):
    path = save_checkpoint(tmp_path / "c.npz", _state(disc1, 1), disc1, "cfg")
    state, meta = load_checkpoint(path, disc1)
    assert state.step == 3 and state.t == 0.125 and state.u_old is None and meta["config"] == "cfg"
    np.testing.assert_array_equal(state.T.coefficients, _state(disc1, 1).T.coefficients)
    other = Discretisation.annulus(max_level=1, blending=False)
    assert mesh_hash(other, 1) != mesh_hash(disc1, 1)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, other)
    # bump the format version in place
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays["meta"]).decode())
    meta["version"] = 99
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(tmp_path / "v.npz", **arrays)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.npz", disc1)
    (tmp_path / "junk.npz").write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.npz", disc1)


# ---------------------------------------------------------------- fitting

def test_fit_slope_and_constant():
    taus = np.array([0.1, 0.05, 0.025])
    errs = 3.0 * taus ** 2
    assert fit_slope(taus, errs) == pytest.approx(2.0)
    assert fit_constant(taus, errs) == pytest.approx(3.0)
    assert math.isnan(fit_slope([0.1], [1.0]))
    assert fit_slope([0.1, 0.05, 0.02], [1.0, np.inf, 0.04]) == pytest.approx(2.0)


def test_manufactured_run_reports_divergence(disc1):
    run = manufactured_run(Discretisation.annulus(8, 2, 0.5, 1.5, max_level=1), 1, 2, 0.1, blowup=1e-12)
    assert run.status == "diverged" and math.isinf(run.error)
