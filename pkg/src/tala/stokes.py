"""Compressible Stokes saddle-point solver.

FGMRES on the projected block system

    [ A    B^T ] [u]   [f]
    [ B+C  0   ] [p] = [g]

right-preconditioned by one step of an Uzawa-type block iteration.  ``A^{-1}``
is approximated by CG with a Chebyshev-smoothed geometric multigrid V-cycle;
the inverse Schur complement by one of three approximations (inverse-
viscosity mass, weighted BFBT, V-cycle BFBT).
"""
from __future__ import annotations

import enum
import logging
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from tala.constraints import BoundaryConditionSet, ProjectionOperator, eliminate_dirichlet, pressure_shift_constant
from tala.femcore.evaluation import quadrature_values
from tala.femcore.operators import (
    CouplingOperator, OperatorTag, ScalarOperator, VectorMass, ViscousOperator, assemble_load,
)
from tala.femcore.spaces import Discretisation, FieldFunction
from tala.femcore.transfer import prolongation_matrix
from tala.femcore.viscosity import ViscosityField
from tala.krylov import (
    ChebyshevConfig, ConvergenceError, LevelOperator, Multigrid, SolveReport,
    StoppingRule, VCycleConfig, cg_solve, fgmres_solve,
)

log = logging.getLogger(__name__)


class UzawaKind(str, enum.Enum):
    INEXACT = "inexact"
    ADJOINT = "adjoint"
    SYMMETRIC = "symmetric"


class SchurKind(str, enum.Enum):
    MASS = "mass"
    WBFBT = "wbfbt"
    VBFBT = "vbfbt"


@dataclass
class SolverConfig:
    """Solver tolerances and smoother parameters (defaults from the paper's table)."""

    sigma: float = 1.0
    omega: float = 0.3
    omega_wbfbt: float | None = None  # w-BFBT override of omega, none = omega
    tol_A: float = 1e-2
    tol_A_single: float = 1e-4      # used by the inexact and adjoint variants
    m_A: int = 3
    deg_A: int = 2
    tol_VBFBT: float = 1e-1
    tol_invMass: float = 1e-10
    tol_wBFBT: float = 1e-10
    m_V: int = 1
    deg_V: int = 1
    tol_coarse: float = 1e-2
    tol_up: float = 1e-5
    tol_T: float = 1e-10
    tol_VectorMass: float = 1e-4
    a_r: float = 1.0
    a_l: float = 1.0
    l_max: int = 4
    l_min: int = 0
    l_eta: int = 2
    uzawa: str = "symmetric"
    schur: str = "vbfbt"
    use_bbar: bool = True           # B + C in the pressure update
    restart: int = 50
    max_outer: int = 200
    max_inner: int = 500
    power_iterations: int = 30
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma", "omega", "tol_A", "tol_A_single", "tol_VBFBT", "tol_invMass", "tol_wBFBT",
                     "tol_coarse", "tol_up", "tol_T", "tol_VectorMass", "a_r", "a_l"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("m_A", "deg_A", "m_V", "deg_V"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.l_min <= self.l_eta <= self.l_max:
            if not self.l_min <= self.l_max:
                raise ValueError("need l_min <= l_max")
            if self.l_eta > self.l_max:
                raise ValueError("need l_eta <= l_max")
        if self.omega_wbfbt is not None and not self.omega_wbfbt > 0:
            raise ValueError("omega_wbfbt must be positive")
        UzawaKind(self.uzawa)
        SchurKind(self.schur)

    def omega_for(self, schur: str | SchurKind) -> float:
        if SchurKind(schur) == SchurKind.WBFBT and self.omega_wbfbt is not None:
            return self.omega_wbfbt
        return self.omega

    def tol_a_for(self, uzawa: str | UzawaKind) -> float:
        return self.tol_A if UzawaKind(uzawa) == UzawaKind.SYMMETRIC else self.tol_A_single

    def replace(self, **changes) -> "SolverConfig":
        return replace(self, **changes)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class BlockVector:
    u: FieldFunction
    p: FieldFunction
    consistent: bool = False

    def stack(self) -> np.ndarray:
        return np.concatenate([self.u.coefficients, self.p.coefficients])


@dataclass
class StokesResult:
    solution: BlockVector
    pressure_shift: float
    report: SolveReport
    inner: dict = field(default_factory=dict)


class InnerCounter(dict):
    def add(self, key, n=1):
        self[key] = self.get(key, 0) + n


class ViscousHierarchy:
    """A-block operators on levels ``l_min..l_max`` with their multigrid."""

    def __init__(self, disc: Discretisation, viscosity: ViscosityField, cfg: SolverConfig):
        self.disc = disc
        self.cfg = cfg
        self.levels = list(range(cfg.l_min, cfg.l_max + 1))
        self.ops, self.projections, self.level_ops = [], [], []
        for lev in self.levels:
            space = disc.space("P2vec", lev)
            op = ViscousOperator(space, viscosity.at_quadrature(lev, 6))
            proj = ProjectionOperator("velocity", space)
            self.ops.append(op)
            self.projections.append(proj)
            diag = op.diagonal()  # no projection in the diagonal
            lv = LevelOperator(lambda x, op=op, proj=proj: proj(op.apply(proj(x))), diag, proj)
            self.level_ops.append(lv)
        self.prolongations = [prolongation_matrix(disc, "P2vec", lev) for lev in self.levels[:-1]]
        coarse = StoppingRule(rtol=cfg.tol_coarse, maxiter=10000)
        self.mg = Multigrid(self.level_ops, self.prolongations, VCycleConfig(
            ChebyshevConfig(cfg.deg_A, cfg.m_A, power_iterations=cfg.power_iterations, seed=cfg.seed), coarse))
        # the cheap cycle reuses the eigenvalue estimates
        self.mg_cheap = Multigrid(self.level_ops, self.prolongations, VCycleConfig(
            ChebyshevConfig(cfg.deg_V, cfg.m_V), coarse), lam_max=self.mg.lam_max)

    @property
    def fine(self) -> LevelOperator:
        return self.level_ops[-1]

    @property
    def fine_operator(self) -> ViscousOperator:
        return self.ops[-1]


class StokesSolver:
    """Saddle-point solver for one viscosity / density configuration.

    Parameters
    ----------
    disc : Discretisation
    viscosity : ViscosityField
    cfg : SolverConfig
    grad_ln_rho : callable or None
        ``x -> ∇ ln ρ``; ``None`` gives the incompressible system (``C = 0``).
    bcs : BoundaryConditionSet
    """

    def __init__(self, disc: Discretisation, viscosity: ViscosityField, cfg: SolverConfig,
                 grad_ln_rho=None, bcs: BoundaryConditionSet | None = None):
        if cfg.l_max != disc.max_level:
            cfg = cfg.replace(l_max=disc.max_level, l_eta=min(cfg.l_eta, disc.max_level))
        self.disc = disc
        self.cfg = cfg
        self.viscosity = viscosity
        self.bcs = bcs or BoundaryConditionSet()
        self.level = cfg.l_max
        self.vspace = disc.space("P2vec", self.level)
        self.pspace = disc.space("P1", self.level)
        self.nu = self.vspace.dim
        self.np = self.pspace.dim
        self.Pu = ProjectionOperator("velocity", self.vspace)
        self.Pp = ProjectionOperator("zero_mean", self.pspace)
        self.hierarchy = ViscousHierarchy(disc, viscosity, cfg)
        self.A = self.hierarchy.fine_operator
        self.B = CouplingOperator(self.vspace, self.pspace)
        if grad_ln_rho is not None:
            geo = disc.geometry(self.level, 4)
            drift = np.moveaxis(grad_ln_rho(geo.points), -1, 0)
            self.C = CouplingOperator(self.vspace, self.pspace, 0.0, drift)
            self.Bfull = CouplingOperator(self.vspace, self.pspace, 1.0, drift)
        else:
            self.C = None
            self.Bfull = self.B
        self.Bbar = self.Bfull if cfg.use_bbar else self.B
        self.counter = InnerCounter()
        self._schur_cache: dict[str, object] = {}

    # ---------------------------------------------------------- block algebra
    def split(self, x):
        return x[:self.nu], x[self.nu:]

    def project(self, x):
        u, p = self.split(x)
        return np.concatenate([self.Pu(u), self.Pp(p)])

    def apply_A(self, u):
        return self.Pu(self.A.apply(self.Pu(u)))

    def apply_BT(self, p):
        return self.Pu(self.B.apply_transpose(self.Pp(p)))

    def block_apply(self, x):
        u, p = self.split(x)
        u = self.Pu(u)
        p = self.Pp(p)
        ru = self.Pu(self.A.apply(u) + self.B.apply_transpose(p))
        rp = self.Pp(self.Bfull.apply(u))
        return np.concatenate([ru, rp])

    # ------------------------------------------------------------ A inverse
    def solve_A(self, r, rtol: float | None = None):
        rtol = self.cfg.tol_a_for(self.cfg.uzawa) if rtol is None else rtol
        mg = self.hierarchy.mg
        x, rep = cg_solve(self.apply_A, self.Pu(r), precond=mg.vcycle,
                          stop=StoppingRule(rtol=rtol, maxiter=self.cfg.max_inner), project=self.Pu)
        self.counter.add("A_cg", rep.iterations)
        self.counter.add("A_solves")
        if not rep.converged:
            log.warning("A-block CG stopped at relative residual %.2e (degraded preconditioner)",
                        rep.final_residual / max(rep.initial_residual, 1e-300))
        return x, rep

    def cheap_A_inverse(self, r):
        """One V-cycle with the cheap smoother settings (``Â_C^{-1}``)."""
        self.counter.add("A_vcycle")
        return self.Pu(self.hierarchy.mg_cheap.vcycle(self.Pu(r)))

    # ------------------------------------------------------- Schur inverses
    def _mass_inv_eta(self):
        if "mass" not in self._schur_cache:
            eta = self.viscosity.at_quadrature(self.level, 6)
            op = ScalarOperator(self.pspace, mass=1.0 / eta, tag=OperatorTag.MASS_INV_ETA)
            self._schur_cache["mass"] = (op, 1.0 / op.diagonal())
        return self._schur_cache["mass"]

    def schur_mass(self, q):
        op, inv = self._mass_inv_eta()
        x, rep = cg_solve(op.apply, self.Pp(q), precond=lambda r: inv * r,
                          stop=StoppingRule(rtol=self.cfg.tol_invMass, maxiter=self.cfg.max_inner),
                          project=self.Pp)
        self.counter.add("schur_inner", rep.iterations)
        return self.Pp(x)

    def _wbfbt_parts(self):
        if "wbfbt" in self._schur_cache:
            return self._schur_cache["wbfbt"]
        cfg = self.cfg
        parts = {}
        for side, a in (("l", cfg.a_l), ("r", cfg.a_r)):
            factor = a * a
            # Neumann Poisson K_{1/sqrt(eta)} with a P1 multigrid
            levels, prolong = [], []
            for lev in range(cfg.l_min, self.level + 1):
                space = self.disc.space("P1", lev)
                coef = self.viscosity.scaled(-0.5, lev, 6, boundary_factor=factor)
                op = ScalarOperator(space, stiffness=coef, tag=OperatorTag.STIFF_INV_SQRT_ETA)
                proj = ProjectionOperator("zero_mean", space)
                levels.append(LevelOperator(lambda x, op=op, proj=proj: proj(op.apply(proj(x))),
                                            op.diagonal(), proj))
                if lev < self.level:
                    prolong.append(prolongation_matrix(self.disc, "P1", lev))
            mg = Multigrid(levels, prolong, VCycleConfig(
                ChebyshevConfig(cfg.deg_A, cfg.m_A, power_iterations=cfg.power_iterations, seed=cfg.seed),
                StoppingRule(rtol=cfg.tol_coarse, maxiter=10000)))
            coef_m = self.viscosity.scaled(0.5, self.level, 6, boundary_factor=factor)
            mass = VectorMass(self.vspace, coef_m, tag=OperatorTag.MASS_SQRT_ETA)
            parts[side] = (levels[-1], mg, mass, 1.0 / mass.diagonal())
        self._schur_cache["wbfbt"] = parts
        return parts

    def _solve_k(self, side, q):
        lv, mg, _, _ = self._wbfbt_parts()[side]
        rhs = self.Pp(q)
        x, rep = cg_solve(lv.op, rhs, precond=mg.vcycle,
                          stop=StoppingRule(rtol=self.cfg.tol_wBFBT, atol=self.cfg.tol_wBFBT,
                                            maxiter=self.cfg.max_inner), project=self.Pp)
        self.counter.add("schur_inner", rep.iterations)
        return x

    def _solve_vector_mass(self, side, v):
        _, _, mass, inv = self._wbfbt_parts()[side]
        x, rep = cg_solve(lambda y: self.Pu(mass.apply(self.Pu(y))), self.Pu(v), precond=lambda r: inv * r,
                          stop=StoppingRule(rtol=self.cfg.tol_VectorMass, maxiter=self.cfg.max_inner),
                          project=self.Pu)
        self.counter.add("vector_mass", rep.iterations)
        return x

    def schur_wbfbt(self, q):
        y = self._solve_k("r", q)
        v = self._solve_vector_mass("r", self.apply_BT(y))
        v = self._solve_vector_mass("l", self.apply_A(v))
        z = self.Pp(self.B.apply(v))
        return self.Pp(self._solve_k("l", z))

    def _bab(self, q):
        return self.Pp(self.B.apply(self.cheap_A_inverse(self.apply_BT(q))))

    def _solve_bab(self, q):
        _, inv = self._mass_inv_eta()
        x, rep = cg_solve(self._bab, self.Pp(q), precond=lambda r: self.Pp(inv * r),
                          stop=StoppingRule(rtol=self.cfg.tol_VBFBT, maxiter=self.cfg.max_inner),
                          project=self.Pp)
        self.counter.add("schur_inner", rep.iterations)
        return x

    def schur_vbfbt(self, q):
        y = self._solve_bab(q)
        v = self.cheap_A_inverse(self.apply_BT(y))
        v = self.cheap_A_inverse(self.apply_A(v))
        z = self.Pp(self.B.apply(v))
        return self.Pp(self._solve_bab(z))

    def schur_apply(self, q, kind: str | SchurKind | None = None):
        kind = SchurKind(kind or self.cfg.schur)
        self.counter.add("schur_applies")
        if kind == SchurKind.MASS:
            return self.schur_mass(q)
        if kind == SchurKind.WBFBT:
            return self.schur_wbfbt(q)
        return self.schur_vbfbt(q)

    # ---------------------------------------------------------------- Uzawa
    def uzawa_step(self, rhs: np.ndarray, state: np.ndarray | None = None, kind=None,
                   a_inverse=None, s_inverse=None) -> np.ndarray:
        """One Uzawa-type update of ``state`` for the block right-hand side ``rhs``."""
        kind = UzawaKind(kind or self.cfg.uzawa)
        a_inv = a_inverse or (lambda r: self.solve_A(r, self.cfg.tol_a_for(kind))[0])
        s_inv = s_inverse or self.schur_apply
        sigma, omega = self.cfg.sigma, self.cfg.omega_for(self.cfg.schur)
        f, g = self.split(self.project(rhs))
        if state is None:
            u = np.zeros(self.nu)
            p = np.zeros(self.np)
        else:
            u, p = self.split(self.project(state))

        def velocity(u, p):
            res = self.Pu(f - self.A.apply(u) - self.B.apply_transpose(p))
            if not np.any(res):
                return u
            return self.Pu(u + sigma * a_inv(res))

        def pressure(u, p):
            res = self.Pp(g - self.Bbar.apply(u))
            if not np.any(res):
                return p
            return self.Pp(p - omega * s_inv(res))

        if kind == UzawaKind.INEXACT:
            u = velocity(u, p)
            p = pressure(u, p)
        elif kind == UzawaKind.ADJOINT:
            p = pressure(u, p)
            u = velocity(u, p)
        else:
            u = velocity(u, p)
            p = pressure(u, p)
            u = velocity(u, p)
        return np.concatenate([u, p])

    # ---------------------------------------------------------------- solve
    def solve(self, f: np.ndarray, g: np.ndarray | None = None, x0: np.ndarray | None = None,
              stop: StoppingRule | None = None, callback=None, raise_on_failure: bool = True) -> StokesResult:
        """Solve with velocity load ``f`` (full vector incl. surface rows) and mass rhs ``g``."""
        g = np.zeros(self.np) if g is None else g
        u_int = self.bcs.surface_interpolant(self.vspace)
        fu, gp = eliminate_dirichlet(self.A.apply, self.Bfull.apply, f, g, u_int, self.Pu, self.Pp)
        rhs = np.concatenate([fu, gp])
        stop = stop or StoppingRule(atol=self.cfg.tol_up, maxiter=self.cfg.max_outer)
        self.counter.clear()
        x, rep = fgmres_solve(self.block_apply, rhs, x0=None if x0 is None else self.project(x0),
                              precond=lambda r: self.uzawa_step(r), stop=stop, restart=self.cfg.restart,
                              project=self.project, callback=callback)
        rep.inner = dict(self.counter)
        if not rep.converged and raise_on_failure:
            raise ConvergenceError(
                f"Stokes FGMRES stopped at residual {rep.final_residual:.3e} after {rep.iterations} iterations")
        du, p = self.split(x)
        u = FieldFunction(self.vspace, u_int + du)
        pf = FieldFunction(self.pspace, p)
        return StokesResult(BlockVector(u, pf, consistent=True), pressure_shift_constant(pf), rep, dict(self.counter))


def buoyancy_values(disc: Discretisation, level: int, temperature: FieldFunction, physics, degree: int = 6):
    """``-(Ra/Pe) ρ α T_d g`` at the quadrature points, shape ``(2, nE, nq)``."""
    from tala.physics import gravity
    geo = disc.geometry(level, degree)
    x = geo.points
    t = quadrature_values(temperature, degree)
    td = t - physics.reference_temperature(x)
    rho = physics.density(x)
    scale = -(physics.ra / physics.pe) * rho * physics.expansivity * td
    return np.moveaxis(scale[..., None] * gravity(x), -1, 0)


def build_stokes_rhs(disc: Discretisation, temperature: FieldFunction, physics, degree: int = 6):
    """Momentum load vector and (zero) continuity right-hand side."""
    level = temperature.space.level
    vspace = disc.space("P2vec", level)
    f = assemble_load(vspace, buoyancy_values(disc, level, temperature, physics, degree), degree)
    return f, np.zeros(disc.space("P1", level).dim)


def make_viscosity_field(disc, temperature, physics, cfg: SolverConfig, surrogate=None) -> ViscosityField:
    return ViscosityField(physics.viscosity, temperature, cfg.l_eta, surrogate=surrogate, disc=disc)


def solve_stokes(disc: Discretisation, temperature: FieldFunction, physics, cfg: SolverConfig,
                 bcs: BoundaryConditionSet | None = None, compressible: bool | None = None,
                 surrogate=None, x0=None, callback=None, stop=None, raise_on_failure=True):
    """Build viscosity, right-hand side and solver, then solve."""
    compressible = physics.compressible if compressible is None else compressible
    visc = make_viscosity_field(disc, temperature, physics, cfg, surrogate)
    grad = physics.density.grad_ln if compressible else None
    solver = StokesSolver(disc, visc, cfg, grad, bcs)
    f, g = build_stokes_rhs(disc, temperature, physics)
    t0 = time.perf_counter()
    result = solver.solve(f, g, x0=x0, callback=callback, stop=stop, raise_on_failure=raise_on_failure)
    result.report.wall_time = time.perf_counter() - t0
    return result, solver
