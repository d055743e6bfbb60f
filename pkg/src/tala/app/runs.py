"""The three run modes: temporal convergence test, solver benchmark, simulation."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tala.app.config import RunConfig, parse_list
from tala.app.io import CsvLog, load_checkpoint, p1_to_p2, save_checkpoint, write_vtk
from tala.app.manufactured import R_CMB, R_SURFACE, T_END, T_START, ManufacturedSolution
from tala.constraints import BoundaryConditionSet
from tala.energy import (EnergyCoefficients, EnergyConfig, MMOCConfig, StepSolvers, TimeState, advance_step,
                         bdf2_coefficients, dirichlet_vector, extrapolate, initial_temperature,
                         mmoc_histories, solve_diffusion_step)
from tala.femcore import Discretisation, ExpSurrogate, FieldFunction, domain_area, mass_norm
from tala.krylov import ConvergenceError, StoppingRule
from tala.physics import gravity
from tala.stokes import SolverConfig, StokesSolver, build_stokes_rhs, make_viscosity_field

log = logging.getLogger(__name__)


class SolverFailure(RuntimeError):
    """A fatal sub-solver failure during a run."""


class _BudgetExceeded(Exception):
    pass


def _budget_left(t0: float, budget: float) -> bool:
    return budget <= 0 or time.perf_counter() - t0 < budget


def fit_slope(taus, errors) -> float:
    """Least-squares slope of ``log error`` against ``log tau`` (finite points only)."""
    taus, errors = np.asarray(taus, float), np.asarray(errors, float)
    ok = np.isfinite(errors) & (errors > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(taus[ok]), np.log(errors[ok]), 1)[0])


def fit_constant(taus, errors, order: float = 2.0) -> float:
    """Constant ``C`` of ``error = C tau^order`` fitted in the log least-squares sense."""
    taus, errors = np.asarray(taus, float), np.asarray(errors, float)
    ok = np.isfinite(errors) & (errors > 0)
    if not ok.any():
        return math.nan
    return float(np.exp(np.mean(np.log(errors[ok]) - order * np.log(taus[ok]))))


# ------------------------------------------------------- convergence test

@dataclass
class ManufacturedRun:
    level: int
    n_steps: int
    k: float
    error: float
    status: str
    wall_time: float
    errors: list[float] = field(default_factory=list)


def manufactured_coefficients(ms: ManufacturedSolution) -> EnergyCoefficients:
    """All material constants one, unit inward gravity, no surface cutoff."""
    return EnergyCoefficients(
        conductivity=ms.k, reaction=1.0, heating=1.0, shear_factor=1.0 if ms.shear_heating else 0.0,
        density=lambda x: np.ones(np.shape(x)[:-1]), grad_ln_density=lambda x: np.zeros(np.shape(x)),
        gravity=gravity, viscosity=ms.viscosity, shear_cutoff=False)


def manufactured_run(disc: Discretisation, level: int, n_steps: int, k: float,
                     energy: EnergyConfig = EnergyConfig(include_lhs_advection=False),
                     mmoc: MMOCConfig = MMOCConfig(), shear_heating: bool = True,
                     blowup: float = 10.0, deadline: float | None = None) -> ManufacturedRun:
    """Integrate the manufactured problem over the test interval with ``n_steps`` equal steps.

    Histories before the start time come from the exact solution.  A solver
    failure, a non-finite field or an error above ``blowup`` ends the run
    with status ``"diverged"`` and an infinite error.  The exact temperature
    has an L2 norm below 3, so the default threshold only catches runs whose
    discrete solution no longer resembles it.
    """
    t_start = time.perf_counter()
    ms = ManufacturedSolution(k, shear_heating=shear_heating)
    sp, vs = disc.space("P2", level), disc.space("P2vec", level)
    x = sp.nodes
    geo = disc.geometry(level, 6)
    coeffs = manufactured_coefficients(ms)
    tau = (T_END - T_START) / n_steps
    bdf = bdf2_coefficients(tau, tau)

    def temp(t):
        return FieldFunction(sp, ms.temperature(t, x))

    def vel(t):
        return FieldFunction(vs, ms.velocity(t, x).ravel())

    T_old, T = temp(T_START - tau), temp(T_START)
    u_old, u = vel(T_START - tau), vel(T_START)
    errors = []
    status = "ok"
    t = T_START
    with np.errstate(over="ignore", invalid="ignore"):  # divergence is detected below
        for n in range(n_steps):
            if deadline is not None and time.perf_counter() > deadline:
                status = "budget"
                break
            t_new = T_START + (n + 1) * tau
            u_star = extrapolate(u, u_old, tau, tau)
            T_star = extrapolate(T, T_old, tau, tau)
            try:
                hat_n, hat_nm1 = mmoc_histories(T, T_old, u_star, u, u_old, tau, tau, mmoc)
                T_new, _ = solve_diffusion_step(
                    sp, bdf, tau, hat_n, hat_nm1, coeffs, ms.temperature(t_new, x), u_star=u_star, T_star=T_star,
                    forcing=ms.forcing(t_new, geo.points), cfg=energy, x0=T.coefficients)
            except (ConvergenceError, FloatingPointError, ValueError) as exc:
                log.info("manufactured run level %d N %d diverged at step %d: %s", level, n_steps, n, exc)
                status = "diverged"
                break
            T_old, T, u_old, u, t = T, T_new, u, vel(t_new), t_new
            err = mass_norm(T - temp(t))
            errors.append(err)
            if not np.isfinite(err) or err > blowup:
                status = "diverged"
                break
    error = errors[-1] if status == "ok" else math.inf
    return ManufacturedRun(level, n_steps, k, error, status, time.perf_counter() - t_start, errors)


@dataclass
class ConvergenceResult:
    runs: list[ManufacturedRun]
    slopes: dict[tuple[float, int], float]
    constants: dict[tuple[float, int], float]


def run_convergence_test(cfg: RunConfig, output: Path | None = None,
                         shear_heating: bool = True) -> ConvergenceResult:
    """Sweep ``k``, level and step count; write ``convergence.csv`` and a fit summary."""
    cc = cfg.convergence
    ks = parse_list(cc.k_values)
    levels = parse_list(cc.levels, int)
    steps = sorted(parse_list(cc.n_steps, int))
    disc = Discretisation.annulus(cfg.mesh.n_tangential, cfg.mesh.n_radial, R_CMB, R_SURFACE,
                                  max_level=max(levels), blending=cfg.mesh.blending)
    energy = EnergyConfig(tol_T=cfg.solver.tol_T, include_lhs_advection=cc.lhs_advection)
    mmoc = MMOCConfig(substeps=cfg.time.mmoc_substeps)
    deadline = time.perf_counter() + cc.wall_budget if cc.wall_budget > 0 else None
    out = None
    if output is not None:
        out = CsvLog(Path(output) / "convergence.csv",
                     ["k", "level", "n_steps", "tau", "l2_error", "status", "wall_time"])
    runs = []
    try:
        for k in ks:
            for level in levels:
                for n in steps:
                    if deadline is not None and time.perf_counter() > deadline:
                        run = ManufacturedRun(level, n, k, math.nan, "budget", 0.0)
                    else:
                        run = manufactured_run(disc, level, n, k, energy, mmoc, shear_heating, deadline=deadline)
                    runs.append(run)
                    log.info("k=%g level=%d N=%d error=%.3e (%s, %.1fs)", k, level, n, run.error, run.status,
                             run.wall_time)
                    if out:
                        out.row([k, level, n, (T_END - T_START) / n, run.error, run.status, run.wall_time])
    finally:
        if out:
            out.close()
    slopes, constants = {}, {}
    for k in ks:
        for level in levels:
            sel = [r for r in runs if r.k == k and r.level == level and r.status == "ok"]
            all_sel = [r for r in runs if r.k == k and r.level == level]
            taus = [(T_END - T_START) / r.n_steps for r in sel]
            errs = [r.error for r in sel]
            complete = len(sel) == len(all_sel)
            slopes[(k, level)] = fit_slope(taus, errs) if complete else math.nan
            constants[(k, level)] = fit_constant(taus, errs) if complete else math.nan
    if output is not None:
        with CsvLog(Path(output) / "convergence_fit.csv", ["k", "level", "slope", "constant"]) as fit:
            for (k, level), s in slopes.items():
                fit.row([k, level, s, constants[(k, level)]])
    return ConvergenceResult(runs, slopes, constants)


# ------------------------------------------------------------ solver bench

def solver_variant(solver: StokesSolver, **changes) -> StokesSolver:
    """Same operators and multigrid hierarchy, different Uzawa/Schur settings."""
    new = copy.copy(solver)
    new.cfg = solver.cfg.replace(**changes)
    new.counter = type(solver.counter)()
    keep = {"mass"} if {"a_r", "a_l"} & set(changes) else {"mass", "wbfbt", "bab"}
    new._schur_cache = {k: v for k, v in solver._schur_cache.items() if k in keep}
    return new


def exp_surrogate_for(physics, t_margin: float = 0.25) -> ExpSurrogate:
    """Surrogate over the exponent range reached for temperatures in the physical window."""
    lo, hi = physics.viscosity.exponent_range(physics.t_surface - t_margin, physics.t_cmb + t_margin,
                                              physics.r_cmb)
    return ExpSurrogate(lo, hi)


def bench_temperature(space, physics, seed: int = 0, noise: float = 0.03) -> FieldFunction:
    return initial_temperature(space, physics, noise=noise, seed=seed)


@dataclass
class BenchRecord:
    uzawa: str
    schur: str
    converged: bool
    iterations: int
    residuals: list[float]
    times: list[float]
    status: str
    inner: dict = field(default_factory=dict)

    def iterations_to(self, reduction: float) -> int | None:
        """First iteration whose residual is below ``reduction * r0``."""
        r0 = self.residuals[0] if self.residuals else 0.0
        for i, r in enumerate(self.residuals):
            if r <= reduction * r0:
                return i
        return None


def build_bench_solver(cfg: RunConfig, level: int | None = None, surrogate: bool = True):
    physics = cfg.physical_params()
    level = cfg.bench.level if level is None else level
    disc = Discretisation.annulus(cfg.mesh.n_tangential, cfg.mesh.n_radial, physics.r_cmb, physics.r_surface,
                                  max_level=level, blending=cfg.mesh.blending)
    scfg = cfg.solver.replace(l_max=level, l_eta=min(cfg.solver.l_eta, level),
                              l_min=min(cfg.solver.l_min, level))
    T = bench_temperature(disc.space("P2", level), physics, cfg.run.seed, cfg.time.noise)
    visc = make_viscosity_field(disc, T, physics, scfg, exp_surrogate_for(physics) if surrogate else None)
    grad = physics.density.grad_ln if physics.compressible else None
    bcs = BoundaryConditionSet(t_surface=physics.t_surface, t_cmb=physics.t_cmb)
    solver = StokesSolver(disc, visc, scfg, grad, bcs)
    f, g = build_stokes_rhs(disc, T, physics)
    return solver, f, g


def bench_variants(cfg: RunConfig) -> list[tuple[str, str, dict]]:
    out = []
    for uz in parse_list(cfg.bench.uzawa, str):
        for sk in parse_list(cfg.bench.schur, str):
            uz, sk = uz.strip(), sk.strip()
            if sk == "wbfbt-asym":
                out.append((uz, sk, {"uzawa": uz, "schur": "wbfbt", "a_r": cfg.bench.asym_a_r,
                                     "a_l": cfg.bench.asym_a_l}))
            else:
                out.append((uz, sk, {"uzawa": uz, "schur": sk}))
    return out


def run_bench_variant(solver: StokesSolver, f, g, uzawa: str, schur: str, changes: dict,
                      atol: float, max_iterations: int, deadline: float | None = None,
                      rtol: float = 0.0, log_row=None) -> BenchRecord:
    variant = solver_variant(solver, **changes)
    t0 = time.perf_counter()
    residuals, times = [], []

    def callback(it, res):
        residuals.append(res)
        times.append(time.perf_counter() - t0)
        if log_row is not None:
            r0 = residuals[0] if residuals[0] > 0 else 1.0
            log_row([uzawa, schur, it, res, res / r0, times[-1]])
        if deadline is not None and time.perf_counter() > deadline:
            raise _BudgetExceeded

    stop = StoppingRule(rtol=rtol, atol=atol, maxiter=max_iterations)
    try:
        res = variant.solve(f, g, stop=stop, callback=callback, raise_on_failure=False)
        rep = res.report
        status = "converged" if rep.converged else "max-iterations"
        return BenchRecord(uzawa, schur, rep.converged, rep.iterations, rep.residuals, times, status,
                           dict(variant.counter))
    except _BudgetExceeded:
        return BenchRecord(uzawa, schur, False, len(residuals) - 1, residuals, times, "budget",
                           dict(variant.counter))


def run_solver_bench(cfg: RunConfig, output: Path | None = None) -> list[BenchRecord]:
    """All configured Uzawa x Schur variants on the initial Stokes solve."""
    t_build = time.perf_counter()
    solver, f, g = build_bench_solver(cfg)
    log.info("bench setup on level %d took %.1fs", solver.level, time.perf_counter() - t_build)
    bc = cfg.bench
    deadline = time.perf_counter() + bc.wall_budget if bc.wall_budget > 0 else None
    out = None
    if output is not None:
        out = CsvLog(Path(output) / "solver_bench.csv",
                     ["uzawa", "schur", "iteration", "residual", "relative_residual", "wall_time"])
    records = []
    try:
        for uz, sk, changes in bench_variants(cfg):
            if deadline is not None and time.perf_counter() > deadline:
                records.append(BenchRecord(uz, sk, False, 0, [], [], "skipped"))
                continue
            rec = run_bench_variant(solver, f, g, uz, sk, changes, bc.atol, bc.max_iterations, deadline,
                                    log_row=out.row if out else None)
            log.info("%s/%s: %s after %d iterations", uz, sk, rec.status, rec.iterations)
            records.append(rec)
    finally:
        if out:
            out.close()
    if output is not None:
        with CsvLog(Path(output) / "solver_bench_summary.csv",
                    ["uzawa", "schur", "status", "iterations", "it_1e-3", "it_1e-6", "wall_time"]) as summ:
            for r in records:
                summ.row([r.uzawa, r.schur, r.status, r.iterations, r.iterations_to(1e-3),
                          r.iterations_to(1e-6), r.times[-1] if r.times else 0.0])
    return records


# -------------------------------------------------------------- simulation

@dataclass
class Simulation:
    """Discretisation, physics and the step machinery of one simulation."""

    cfg: RunConfig
    disc: Discretisation
    physics: object
    solvers: StepSolvers
    surrogate: ExpSurrogate | None
    level: int

    @classmethod
    def build(cls, cfg: RunConfig) -> "Simulation":
        physics = cfg.physical_params()
        level = cfg.solver.l_max
        disc = Discretisation.annulus(cfg.mesh.n_tangential, cfg.mesh.n_radial, physics.r_cmb,
                                      physics.r_surface, max_level=level, blending=cfg.mesh.blending)
        surrogate = exp_surrogate_for(physics)
        scfg = cfg.solver
        bcs = BoundaryConditionSet(t_surface=physics.t_surface, t_cmb=physics.t_cmb)
        tspace = disc.space("P2", level)

        def stokes(T, compressible, state):
            return solve_flow(disc, T, physics, scfg, bcs, compressible, surrogate, state)

        solvers = StepSolvers(
            stokes=stokes, coefficients=EnergyCoefficients.from_physics(physics),
            dirichlet=dirichlet_vector(tspace, physics.t_surface, physics.t_cmb), c_cfl=cfg.time.c_cfl,
            tau_max=cfg.time.tau_max, tau_first=cfg.time.tau_first,
            window=(cfg.time.window_lo, cfg.time.window_hi),
            energy=EnergyConfig(tol_T=scfg.tol_T, include_lhs_advection=cfg.time.lhs_advection),
            mmoc=MMOCConfig(substeps=cfg.time.mmoc_substeps))
        return cls(cfg, disc, physics, solvers, surrogate, level)

    def initial_state(self) -> TimeState:
        tspace = self.disc.space("P2", self.level)
        T0 = initial_temperature(tspace, self.physics, noise=self.cfg.time.noise, seed=self.cfg.run.seed)
        u0 = self.disc.space("P2vec", self.level).function()
        return TimeState(step=0, t=0.0, tau=0.0, T=T0, T_old=None, u=u0, u_old=None, p=None)

    def step(self, state: TimeState) -> TimeState:
        return advance_step(state, self.solvers)


def solve_flow(disc, T, physics, scfg: SolverConfig, bcs, compressible: bool, surrogate, state):
    """Stokes solve for the simulation loop, warm-started from the previous state."""
    visc = make_viscosity_field(disc, T, physics, scfg, surrogate)
    grad = physics.density.grad_ln if compressible else None
    solver = StokesSolver(disc, visc, scfg, grad, bcs)
    f, g = build_stokes_rhs(disc, T, physics)
    x0 = None
    if state is not None and state.p is not None:
        u_int = bcs.surface_interpolant(solver.vspace)
        x0 = np.concatenate([state.u.coefficients - u_int, state.p.coefficients])
    res = solver.solve(f, g, x0=x0)
    return res.solution.u, res.solution.p, res.report


def rms_velocity(u: FieldFunction) -> float:
    return mass_norm(u) / math.sqrt(domain_area(u.space.disc, u.space.level))


def snapshot_fields(sim: Simulation, state: TimeState) -> dict[str, np.ndarray]:
    tspace = state.T.space
    x = tspace.nodes
    T = state.T.coefficients
    fields = {"T": T, "T_d": T - sim.physics.reference_temperature(x), "u": state.u.values,
              "eta": np.asarray(sim.physics.viscosity(x, T), dtype=float)}
    if state.p is not None:
        fields["p"] = p1_to_p2(tspace, state.p.coefficients)
    return fields


SIM_COLUMNS = ["step", "t", "tau", "vrms", "T_mean", "T_d_min", "T_d_max", "energy_iterations",
               "stokes_iterations", "stokes_residual", "wall_time"]


def run_simulation(cfg: RunConfig, output: Path, checkpoint: Path | None = None,
                   resume: Path | None = None, on_step=None) -> TimeState:
    """Time loop with CSV series, VTK snapshots and checkpoints.

    Raises :class:`SolverFailure` after writing a final checkpoint when a
    sub-solver fails.
    """
    output = Path(output)
    output.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(checkpoint) if checkpoint else output / "checkpoint.npz"
    sim = Simulation.build(cfg)
    if resume is not None:
        state, _ = load_checkpoint(resume, sim.disc)
        log.info("resumed at step %d, t = %.6g", state.step, state.t)
    else:
        state = sim.initial_state()
    t0 = time.perf_counter()
    series = CsvLog(output / "timeseries.csv", SIM_COLUMNS, append=resume is not None)
    config_text = cfg.dumps()
    tc = cfg.time
    try:
        while state.t < tc.t_end and state.step < tc.max_steps:
            if not _budget_left(t0, cfg.run.wall_budget):
                log.warning("wall budget reached at step %d", state.step)
                break
            w0 = time.perf_counter()
            try:
                state = sim.step(state)
            except (ConvergenceError, FloatingPointError) as exc:
                save_checkpoint(checkpoint, state, sim.disc, config_text, {"failed": str(exc)})
                raise SolverFailure(str(exc)) from exc
            Td = state.T.coefficients - sim.physics.reference_temperature(state.T.space.nodes)
            srep = state.reports.get("stokes")
            erep = state.reports.get("energy")
            series.row([state.step, state.t, state.tau, rms_velocity(state.u),
                        float(np.mean(state.T.coefficients)), float(Td.min()), float(Td.max()),
                        erep.iterations if erep else 0, srep.iterations if srep else 0,
                        srep.final_residual if srep else 0.0, time.perf_counter() - w0])
            if cfg.run.output_every > 0 and state.step % cfg.run.output_every == 0:
                write_vtk(output / f"fields_{state.step:05d}.vtk", state.T.space, snapshot_fields(sim, state),
                          title=f"tala step {state.step} t {state.t!r}")
            if cfg.run.checkpoint_every > 0 and state.step % cfg.run.checkpoint_every == 0:
                save_checkpoint(checkpoint, state, sim.disc, config_text)
            if on_step is not None:
                on_step(sim, state)
        save_checkpoint(checkpoint, state, sim.disc, config_text)
    finally:
        series.close()
    return state


__all__ = [
    "BenchRecord", "ConvergenceResult", "ManufacturedRun", "Simulation", "SolverFailure", "bench_variants",
    "build_bench_solver", "exp_surrogate_for", "fit_constant", "fit_slope", "manufactured_run",
    "rms_velocity", "run_bench_variant", "run_convergence_test", "run_simulation", "run_solver_bench",
    "snapshot_fields", "solver_variant",
]
