"""Time integration of the energy equation.

Variable-step BDF2 along characteristics: the history values are
transported by a particle method of characteristics (RK4 backtracking on a
time-linear velocity) and the remaining diffusion/reaction problem is solved
with FGMRES preconditioned by CG on its symmetric part.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from tala.constraints import ProjectionOperator
from tala.femcore.evaluation import evaluate_located, locate, quadrature_gradients, quadrature_values
from tala.femcore.operators import ScalarOperator, assemble_load, energy_operator
from tala.femcore.spaces import FieldFunction, FunctionSpace
from tala.krylov import ConvergenceError, SolveReport, StoppingRule, cg_solve, fgmres_solve

log = logging.getLogger(__name__)

DEGREE = 6


# ------------------------------------------------------------------- BDF2

@dataclass(frozen=True)
class BDF2Coefficients:
    """``D[T^{n+1}, T^n, T^{n-1}] = s_new T^{n+1} - s_cur T^n + s_old T^{n-1}``."""

    s_new: float
    s_cur: float
    s_old: float

    @classmethod
    def implicit_euler(cls) -> "BDF2Coefficients":
        return cls(1.0, 1.0, 0.0)


def bdf2_coefficients(tau_new: float, tau_old: float) -> BDF2Coefficients:
    if not (tau_new > 0 and tau_old > 0):
        raise ValueError("time steps must be positive")
    return BDF2Coefficients(
        s_new=(2 * tau_new + tau_old) / (tau_new + tau_old),
        s_cur=(tau_new + tau_old) / tau_old,
        s_old=tau_new * tau_new / (tau_old * (tau_new + tau_old)),
    )


def extrapolate(f_n, f_nm1, tau_new: float, tau_old: float):
    """Linear extrapolation ``f^n + (f^n - f^{n-1}) tau_new / tau_old``."""
    if tau_old == 0:
        raise ValueError("extrapolation needs a nonzero previous step")
    if isinstance(f_n, FieldFunction):
        return FieldFunction(f_n.space, extrapolate(f_n.coefficients, f_nm1.coefficients, tau_new, tau_old))
    f_n = np.asarray(f_n, dtype=float)
    return f_n + (f_n - np.asarray(f_nm1, dtype=float)) * (tau_new / tau_old)


# ------------------------------------------------------------------- MMOC

@dataclass(frozen=True)
class MMOCConfig:
    """Backtracking settings.

    ``substeps=None`` picks ``ceil(tau * max speed / min h)`` RK4 substeps.
    """

    substeps: int | None = None
    clamp_eps: float = 1e-12
    max_substeps: int = 10000


def substep_count(tau: float, max_speed: float, min_h: float, cap: int = 10000) -> int:
    if max_speed <= 0 or tau <= 0:
        return 1
    return int(min(cap, max(1, math.ceil(tau * max_speed / min_h - 1e-12))))


def clamp_to_shell(disc, points: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Pull points back radially into ``[r_cmb + eps, r_surface - eps]``."""
    r = disc.blending.domain_radius(points)
    lo, hi = disc.r_cmb + eps, disc.r_surface - eps
    bad = (r < lo) | (r > hi)
    if not np.any(bad):
        return points
    out = np.array(points, dtype=float)
    out[bad] *= (np.clip(r[bad], lo, hi) / r[bad])[:, None]
    return out


class LinearInTime:
    """``u(θ) = θ u_new + (1 - θ) u_old`` for ``θ ∈ [0, 1]``, evaluated at points."""

    def __init__(self, u_new: FieldFunction, u_old: FieldFunction):
        self.u_new = u_new
        self.u_old = u_old
        self.disc = u_new.space.disc
        self.level = u_new.space.level
        self.same = u_new is u_old or np.array_equal(u_new.coefficients, u_old.coefficients)

    def __call__(self, theta: float, x: np.ndarray) -> np.ndarray:
        where = locate(self.disc, self.level, x)
        a = evaluate_located(self.u_new, where)
        if self.same or theta == 1.0:
            return a
        b = evaluate_located(self.u_old, where)
        return theta * a + (1.0 - theta) * b

    def max_speed(self) -> float:
        s = 0.0
        for u in (self.u_new, self.u_old):
            v = u.coefficients.reshape(-1, 2)
            s = max(s, float(np.sqrt((v * v).sum(axis=1)).max(initial=0.0)))
        return s


def track_departure(disc, points: np.ndarray, velocity: Callable, tau: float, substeps: int,
                    eps: float = 1e-12) -> np.ndarray:
    """Departure points ``X(t - tau)`` of particles arriving at ``points`` at ``t``.

    ``velocity(θ, x)`` gives the velocity at the fraction ``θ`` of the step
    (``θ = 1`` at arrival).  Classical RK4 runs backwards with ``substeps``
    equal steps; every stage is clamped into the shell.
    """
    x = np.array(points, dtype=float)
    h = -1.0 / substeps
    theta = 1.0
    for _ in range(substeps):
        k1 = tau * velocity(theta, x)
        x2 = clamp_to_shell(disc, x + 0.5 * h * k1, eps)
        k2 = tau * velocity(theta + 0.5 * h, x2)
        x3 = clamp_to_shell(disc, x + 0.5 * h * k2, eps)
        k3 = tau * velocity(theta + 0.5 * h, x3)
        x4 = clamp_to_shell(disc, x + h * k3, eps)
        k4 = tau * velocity(theta + h, x4)
        x = clamp_to_shell(disc, x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4), eps)
        theta += h
    return x


def departure_points(space: FunctionSpace, u_new: FieldFunction, u_old: FieldFunction, tau: float,
                     cfg: MMOCConfig = MMOCConfig()) -> np.ndarray:
    vel = LinearInTime(u_new, u_old)
    nodes = space.nodes
    speed = vel.max_speed()
    if speed == 0.0:
        return nodes.copy()
    if cfg.substeps is None:
        h_min = float(space.disc.mesh[space.level].element_diameters.min())
        n_sub = substep_count(tau, speed, h_min, cfg.max_substeps)
    else:
        n_sub = int(cfg.substeps)
    return track_departure(space.disc, nodes, vel, tau, n_sub, cfg.clamp_eps)


def evaluate_at_departure(field: FieldFunction, points: np.ndarray) -> FieldFunction:
    where = locate(field.space.disc, field.space.level, points)
    vals = evaluate_located(field, where)
    if np.any(~where.inside):
        raise RuntimeError("departure point outside the shell after clamping")
    return FieldFunction(field.space, vals)


def mmoc_advect(T: FieldFunction, u_new: FieldFunction, u_old: FieldFunction, tau: float,
                cfg: MMOCConfig = MMOCConfig(), departure: np.ndarray | None = None) -> FieldFunction:
    """``T`` evaluated at the departure points of the nodes of its space."""
    if u_new.space.level != T.space.level or u_old.space.level != T.space.level:
        raise ValueError("velocity and temperature must live on the same level")
    if departure is None and not (np.any(u_new.coefficients) or np.any(u_old.coefficients)):
        return T.copy()
    if departure is None:
        departure = departure_points(T.space, u_new, u_old, tau, cfg)
    return evaluate_at_departure(T, departure)


def mmoc_histories(T_n: FieldFunction, T_nm1: FieldFunction, u_star: FieldFunction, u_n: FieldFunction,
                   u_nm1: FieldFunction, tau_new: float, tau_old: float, cfg: MMOCConfig = MMOCConfig()):
    """``(T̂^n, T̂^{n-1})`` with the nested second transport.

    ``T̂^{n-1} = MMOC(MMOC(T^{n-1}, u_*, u^n, τ^{n+1}), u^n, u^{n-1}, τ^n)``; the
    inner transport shares its departure points with ``T̂^n``.
    """
    x1 = departure_points(T_n.space, u_star, u_n, tau_new, cfg)
    hat_n = evaluate_at_departure(T_n, x1)
    inner = evaluate_at_departure(T_nm1, x1)
    hat_nm1 = mmoc_advect(inner, u_n, u_nm1, tau_old, cfg)
    return hat_n, hat_nm1


# -------------------------------------------------------- diffusion solve

@dataclass
class EnergyCoefficients:
    """Nondimensional coefficients of the temperature step.

    ``conductivity`` is ``k / (Pe C^p)``, ``reaction`` is ``Di α / C^p``,
    ``heating`` is ``H / C^p`` and ``shear_factor`` is ``Pe Di / (Ra C^p)``.
    """

    conductivity: float
    reaction: float
    heating: float
    shear_factor: float
    density: Callable[[np.ndarray], np.ndarray]
    grad_ln_density: Callable[[np.ndarray], np.ndarray]
    gravity: Callable[[np.ndarray], np.ndarray]
    viscosity: Callable | None = None
    shear_cutoff: bool = True

    @classmethod
    def from_physics(cls, physics, shear_cutoff: bool = True) -> "EnergyCoefficients":
        from tala.physics import gravity
        cp = physics.heat_capacity
        dens = physics.density
        return cls(
            conductivity=physics.conductivity / (physics.pe * cp),
            reaction=physics.di * physics.expansivity / cp if physics.adiabatic_heating else 0.0,
            heating=physics.internal_heating / cp,
            shear_factor=physics.pe * physics.di / (physics.ra * cp)
            if physics.shear_heating and physics.ra != 0 else 0.0,  # Ra = 0: no flow to heat
            density=dens, grad_ln_density=dens.grad_ln, gravity=gravity,
            viscosity=physics.viscosity, shear_cutoff=shear_cutoff,
        )


@dataclass
class EnergyConfig:
    tol_T: float = 1e-10
    rtol_floor: float = 1e-13       # reduction that ends the solve if tol_T is out of rounding reach
    include_lhs_advection: bool = True
    restart: int = 50
    max_outer: int = 200
    precond_rtol: float = 1e-12
    precond_maxiter: int = 5000


def deviatoric_strain_norm2(u: FieldFunction, degree: int = DEGREE) -> np.ndarray:
    """``ε̇(u):ε̇(u)`` at quadrature points, with ``ε̇`` the 2D deviatoric strain rate."""
    g = quadrature_gradients(u, degree)
    exx, eyy = g[0, 0], g[1, 1]
    exy = 0.5 * (g[0, 1] + g[1, 0])
    half = 0.5 * (exx + eyy)
    return (exx - half) ** 2 + (eyy - half) ** 2 + 2.0 * exy ** 2


def shear_heating_values(u: FieldFunction, T: FieldFunction, coeffs: EnergyCoefficients,
                         degree: int = DEGREE) -> np.ndarray:
    """``shear_factor / ρ · 2 η(x, T) ε̇:ε̇`` at quadrature points, zeroed near the surface."""
    geo = u.space.disc.geometry(u.space.level, degree)
    x = geo.points
    eta = np.asarray(coeffs.viscosity(x, quadrature_values(T, degree)), dtype=float)
    vals = coeffs.shear_factor / coeffs.density(x) * 2.0 * eta * deviatoric_strain_norm2(u, degree)
    if coeffs.shear_cutoff:
        vals[u.space.disc.mesh[u.space.level].surface_elements] = 0.0
    return vals


def energy_system(space: FunctionSpace, bdf: BDF2Coefficients, tau: float, coeffs: EnergyCoefficients,
                  u_star: FieldFunction | None, include_advection: bool = False) -> ScalarOperator:
    geo = space.disc.geometry(space.level, DEGREE)
    x = geo.points
    vel = quadrature_values(u_star, DEGREE) if u_star is not None else None
    grav = np.moveaxis(coeffs.gravity(x), -1, 0)
    return energy_operator(
        space, s_new=bdf.s_new, tau=tau, conductivity=coeffs.conductivity, rho=coeffs.density(x),
        grad_ln_rho=np.moveaxis(coeffs.grad_ln_density(x), -1, 0), velocity=vel, gravity=grav,
        reaction=coeffs.reaction, include_advection=include_advection, degree=DEGREE)


def solve_diffusion_step(space: FunctionSpace, bdf: BDF2Coefficients, tau: float, hat_n: FieldFunction,
                         hat_nm1: FieldFunction | None, coeffs: EnergyCoefficients, dirichlet: np.ndarray,
                         u_star: FieldFunction | None = None, T_star: FieldFunction | None = None,
                         forcing: np.ndarray | None = None, cfg: EnergyConfig = EnergyConfig(),
                         x0: np.ndarray | None = None) -> tuple[FieldFunction, SolveReport]:
    """Solve the weak temperature step for ``T^{n+1}``.

    ``dirichlet`` holds the boundary values on boundary rows (other rows are
    ignored).  ``forcing`` is an optional extra source sampled at quadrature
    points.  History terms enter as ``s^n M T̂^n - s^{n-1} M T̂^{n-1}`` and the
    sources are multiplied by ``tau``.
    """
    has_shear = (coeffs.shear_factor and u_star is not None and T_star is not None
                 and coeffs.viscosity is not None)
    op = energy_system(space, bdf, tau, coeffs, u_star, cfg.include_lhs_advection)
    mass = ScalarOperator(space, mass=1.0, degree=DEGREE)
    hist = bdf.s_cur * hat_n.coefficients
    if hat_nm1 is not None and bdf.s_old != 0.0:
        hist = hist - bdf.s_old * hat_nm1.coefficients
    rhs = mass.apply(hist)
    geo = space.disc.geometry(space.level, DEGREE)
    src = np.full((geo.n_elements, geo.n_points), coeffs.heating)
    if has_shear:
        src = src + shear_heating_values(u_star, T_star, coeffs)
    if forcing is not None:
        src = src + forcing
    if np.any(src):
        rhs = rhs + tau * assemble_load(space, src, DEGREE)

    P = ProjectionOperator("dirichlet", space)
    t_d = np.zeros(space.dim)
    b_nodes = space.boundary_nodes
    t_d[b_nodes] = np.asarray(dirichlet, dtype=float)[b_nodes]
    r = P(rhs - op.apply(t_d))
    sym = op.symmetric_part()
    inv_diag = 1.0 / np.where(P.mask() > 0, sym.diagonal(), 1.0)

    def apply_op(v):
        return P(op.apply(P(v)))

    def apply_sym(v):
        return P(sym.apply(P(v)))

    def precond(v):
        z, _ = cg_solve(apply_sym, P(v), precond=lambda w: inv_diag * w,
                        stop=StoppingRule(rtol=cfg.precond_rtol, maxiter=cfg.precond_maxiter), project=P)
        return z

    guess = None if x0 is None else P(np.asarray(x0, dtype=float) - t_d)
    x, rep = fgmres_solve(apply_op, r, x0=guess, precond=precond,
                          stop=StoppingRule(rtol=cfg.rtol_floor, atol=cfg.tol_T, maxiter=cfg.max_outer),
                          restart=cfg.restart, project=P)
    if not rep.converged:
        raise ConvergenceError(f"temperature FGMRES stopped at residual {rep.final_residual:.3e}")
    return FieldFunction(space, t_d + x), rep


# ------------------------------------------------------------- time step

def element_speed_over_h(u: FieldFunction) -> np.ndarray:
    """``max_{nodes of K} |u| / h_K`` for every element."""
    lev = u.space.disc.mesh[u.space.level]
    speed = np.sqrt((u.coefficients.reshape(-1, 2) ** 2).sum(axis=1))
    return speed[u.space.dofmap].max(axis=1) / lev.element_diameters


def cfl_timestep(u: FieldFunction, c_cfl: float, tau_max: float, tau_old: float | None = None,
                 window: tuple[float, float] = (0.5, 1.5)) -> float:
    """Largest step with ``τ max_K |u|_K / h_K <= C_CFL``, capped by ``tau_max`` and the ratio window.

    The lower end of the window never overrides the CFL bound or ``tau_max``.
    """
    rate = float(element_speed_over_h(u).max(initial=0.0))
    tau = tau_max if rate == 0.0 else min(c_cfl / rate, tau_max)
    if tau_old is not None and tau_old > 0:
        lo, hi = window
        tau = min(tau, hi * tau_old)
        if tau < lo * tau_old:
            log.warning("step ratio %.3f below the BDF2 window; CFL bound takes precedence", tau / tau_old)
    return tau


# ------------------------------------------------------------ time state

@dataclass
class TimeState:
    """Fields at ``t^n`` and ``t^{n-1}``.

    ``tau`` is the last step ``τ^n`` (zero before the first step).
    """

    step: int
    t: float
    tau: float
    T: FieldFunction
    T_old: FieldFunction | None
    u: FieldFunction
    u_old: FieldFunction | None
    p: FieldFunction | None = None
    reports: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("time step must be nonnegative")
        levels = {f.space.level for f in (self.T, self.T_old, self.u, self.u_old, self.p) if f is not None}
        if len(levels) > 1:
            raise ValueError("all fields of a time state must share one level")


def initial_temperature(space: FunctionSpace, physics, noise: float = 0.03, seed: int = 0) -> FieldFunction:
    """Adiabatic reference profile with relative uniform noise on interior nodes."""
    x = space.nodes
    base = physics.reference_temperature(x)
    rng = np.random.default_rng(seed)
    vals = base * (1.0 + noise * rng.uniform(-1.0, 1.0, size=base.shape))
    vals[space.surface_nodes] = physics.t_surface
    vals[space.cmb_nodes] = physics.t_cmb
    return FieldFunction(space, vals)


def dirichlet_vector(space: FunctionSpace, t_surface: float, t_cmb: float) -> np.ndarray:
    out = np.zeros(space.dim)
    out[space.surface_nodes] = t_surface
    out[space.cmb_nodes] = t_cmb
    return out


@dataclass
class StepSolvers:
    """What :func:`advance_step` needs besides the state.

    ``stokes(T, compressible, previous)`` returns ``(u, p, report)``.
    """

    stokes: Callable
    coefficients: EnergyCoefficients
    dirichlet: np.ndarray
    c_cfl: float = 1.0
    tau_max: float = 1.0
    tau_first: float | None = None
    window: tuple[float, float] = (0.5, 1.5)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    mmoc: MMOCConfig = field(default_factory=MMOCConfig)


def advance_step(state: TimeState, solvers: StepSolvers) -> TimeState:
    """One step of the alternating temperature / Stokes scheme.

    The first step uses implicit Euler with ``u^0 = 0`` and an incompressible
    Stokes solve; later steps use BDF2 with extrapolated ``u_*`` and ``T_*``.
    """
    space = state.T.space
    reports = {}
    t0 = time.perf_counter()
    if state.step == 0:
        tau = solvers.tau_first if solvers.tau_first is not None else cfl_timestep(
            state.u, solvers.c_cfl, solvers.tau_max)
        bdf = BDF2Coefficients.implicit_euler()
        u_star = state.u
        T_star = state.T
        if np.any(state.u.coefficients):
            hat_n = mmoc_advect(state.T, state.u, state.u, tau, solvers.mmoc)
        else:
            hat_n = state.T.copy()
        hat_nm1 = None
        compressible = False
    else:
        tau = cfl_timestep(state.u, solvers.c_cfl, solvers.tau_max, state.tau, solvers.window)
        bdf = bdf2_coefficients(tau, state.tau)
        u_star = extrapolate(state.u, state.u_old, tau, state.tau)
        T_star = extrapolate(state.T, state.T_old, tau, state.tau)
        hat_n, hat_nm1 = mmoc_histories(state.T, state.T_old, u_star, state.u, state.u_old,
                                        tau, state.tau, solvers.mmoc)
        compressible = True
    reports["mmoc_time"] = time.perf_counter() - t0
    T_new, rep_t = solve_diffusion_step(space, bdf, tau, hat_n, hat_nm1, solvers.coefficients,
                                        solvers.dirichlet, u_star=u_star, T_star=T_star,
                                        cfg=solvers.energy, x0=state.T.coefficients)
    reports["energy"] = rep_t
    u_new, p_new, rep_s = solvers.stokes(T_new, compressible, state)
    reports["stokes"] = rep_s
    return TimeState(step=state.step + 1, t=state.t + tau, tau=tau, T=T_new, T_old=state.T,
                     u=u_new, u_old=state.u, p=p_new, reports=reports)


__all__ = [
    "BDF2Coefficients", "EnergyCoefficients", "EnergyConfig", "LinearInTime", "MMOCConfig", "StepSolvers",
    "TimeState", "advance_step", "bdf2_coefficients", "cfl_timestep", "clamp_to_shell", "departure_points",
    "deviatoric_strain_norm2", "dirichlet_vector", "element_speed_over_h", "energy_system", "extrapolate",
    "initial_temperature", "mmoc_advect", "mmoc_histories", "shear_heating_values", "solve_diffusion_step",
    "substep_count", "track_departure",
]
