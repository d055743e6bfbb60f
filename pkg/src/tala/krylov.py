"""Krylov solvers, the Chebyshev smoother and the geometric multigrid V-cycle.

All routines act on flat numpy vectors through plain callables, so the same
code serves velocity, pressure and temperature problems.  An optional
``project`` hook keeps iterates inside a constrained subspace (free-slip,
zero-mean, Dirichlet rows), which is how singular but consistent systems
are handled.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

Vector = np.ndarray
LinearMap = Callable[[Vector], Vector]


class ConvergenceError(RuntimeError):
    """Raised when a solver whose failure is fatal exhausts its budget."""


class SpectrumError(ValueError):
    """Raised for an unusable spectral estimate (e.g. a zero operator)."""


def _identity(x):
    return x


@dataclass(frozen=True)
class StoppingRule:
    """Stop once ``|r| <= rtol |r0|`` or ``|r| <= atol``, whichever comes first."""

    rtol: float = 0.0
    atol: float = 0.0
    maxiter: int = 1000

    def __post_init__(self):
        if self.rtol < 0 or self.atol < 0:
            raise ValueError("tolerances must be nonnegative")
        if self.rtol == 0 and self.atol == 0:
            raise ValueError("at least one tolerance must be positive")
        if self.maxiter < 1:
            raise ValueError("maxiter must be positive")

    def target(self, r0: float) -> float:
        return max(self.rtol * r0, self.atol)


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residuals: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    times: list[float] = field(default_factory=list)
    inner: dict = field(default_factory=dict)

    @property
    def initial_residual(self) -> float:
        return self.residuals[0] if self.residuals else 0.0

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else 0.0


# ------------------------------------------------------------------------ CG

def cg_solve(op: LinearMap, rhs: Vector, x0: Vector | None = None, precond: LinearMap | None = None,
             stop: StoppingRule = StoppingRule(rtol=1e-8), project: LinearMap | None = None,
             raise_on_failure: bool = False) -> tuple[Vector, SolveReport]:
    """Preconditioned conjugate gradients.

    Convergence is measured in the Euclidean norm of the (projected) residual.
    """
    t0 = time.perf_counter()
    proj = project or _identity
    prec = precond or _identity
    x = np.zeros_like(rhs) if x0 is None else proj(np.array(x0, dtype=float))
    r = proj(rhs - op(x)) if x0 is not None else proj(np.array(rhs, dtype=float))
    rnorm = float(np.linalg.norm(r))
    report = SolveReport(converged=False, iterations=0, residuals=[rnorm])
    target = stop.target(rnorm)
    if rnorm <= target or rnorm == 0.0:
        report.converged = True
        report.wall_time = time.perf_counter() - t0
        return x, report
    z = proj(prec(r))
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, stop.maxiter + 1):
        q = proj(op(p))
        pq = float(p @ q)
        if pq <= 0.0 or not math.isfinite(pq):
            log.debug("cg: breakdown (p.Ap = %g)", pq)
            break
        alpha = rz / pq
        x += alpha * p
        r -= alpha * q
        rnorm = float(np.linalg.norm(r))
        report.residuals.append(rnorm)
        report.iterations = it
        if rnorm <= target:
            report.converged = True
            break
        z = proj(prec(r))
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    report.wall_time = time.perf_counter() - t0
    if not report.converged and raise_on_failure:
        raise ConvergenceError(f"CG did not converge in {report.iterations} iterations")
    return x, report


# -------------------------------------------------------------------- FGMRES

def fgmres_solve(op: LinearMap, rhs: Vector, x0: Vector | None = None, precond: LinearMap | None = None,
                 stop: StoppingRule = StoppingRule(rtol=1e-8), restart: int = 50,
                 project: LinearMap | None = None, callback: Callable | None = None,
                 raise_on_failure: bool = False) -> tuple[Vector, SolveReport]:
    """Right-preconditioned flexible GMRES with restarts.

    The preconditioned directions ``z_j`` are stored, so the preconditioner
    may change from one iteration to the next.  ``callback(iteration,
    residual_norm)`` is called after every iteration.
    """
    t0 = time.perf_counter()
    proj = project or _identity
    prec = precond or _identity
    x = np.zeros_like(rhs, dtype=float) if x0 is None else proj(np.array(x0, dtype=float))
    r = proj(rhs - op(x))
    beta = float(np.linalg.norm(r))
    report = SolveReport(converged=False, iterations=0, residuals=[beta], times=[0.0])
    target = stop.target(beta)
    if callback:
        callback(0, beta)
    if beta <= target or beta == 0.0:
        report.converged = True
        report.wall_time = time.perf_counter() - t0
        return x, report
    total = 0
    while total < stop.maxiter:
        m = min(restart, stop.maxiter - total)
        V = np.zeros((m + 1, len(rhs)))
        Z = np.zeros((m, len(rhs)))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j_done = 0
        for j in range(m):
            Z[j] = proj(prec(V[j]))
            w = proj(op(Z[j]))
            for i in range(j + 1):  # modified Gram-Schmidt
                H[i, j] = w @ V[i]
                w -= H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            if H[j + 1, j] > 1e-14 * max(1.0, abs(H[j, j])):
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                tmp = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = tmp
            denom = math.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            total += 1
            j_done = j + 1
            res = abs(g[j + 1])
            report.residuals.append(float(res))
            report.times.append(time.perf_counter() - t0)
            report.iterations = total
            if callback:
                callback(total, float(res))
            if res <= target or denom == 0.0 or not np.any(V[j + 1]):
                break
        y = np.linalg.lstsq(np.triu(H[:j_done, :j_done]), g[:j_done], rcond=None)[0]
        x = proj(x + y @ Z[:j_done])
        r = proj(rhs - op(x))
        beta = float(np.linalg.norm(r))
        report.residuals[-1] = beta
        if beta <= target:
            report.converged = True
            break
        if j_done < m and not np.any(V[j_done]):
            # happy breakdown without reaching the target: stagnation
            break
    report.wall_time = time.perf_counter() - t0
    if not report.converged and raise_on_failure:
        raise ConvergenceError(
            f"FGMRES did not reach {target:.3e} in {report.iterations} iterations "
            f"(residual {report.final_residual:.3e})")
    return x, report


# ----------------------------------------------------------------- Chebyshev

def estimate_spectral_bound(op: LinearMap, inv_diag: Vector, iterations: int = 30, seed: int = 0,
                            project: LinearMap | None = None) -> float:
    """Power iteration estimate of the largest eigenvalue of ``D^{-1} A``."""
    proj = project or _identity
    rng = np.random.default_rng(seed)
    x = proj(rng.standard_normal(len(inv_diag)))
    nx = np.linalg.norm(x)
    if nx == 0.0:
        raise SpectrumError("projection annihilates the start vector")
    x /= nx
    lam = 0.0
    for _ in range(iterations):
        y = proj(inv_diag * op(x))
        ny = float(np.linalg.norm(y))
        if ny == 0.0:
            raise SpectrumError("operator is zero on the start vector")
        lam = ny
        x = y / ny
    if not lam > 0.0:
        raise SpectrumError("nonpositive spectral estimate")
    return lam


@dataclass
class ChebyshevConfig:
    """Chebyshev smoother settings.

    The target interval is ``[hi / ratio, hi]`` with ``hi = safety * lambda_max``.
    """

    degree: int = 2
    steps: int = 3
    safety: float = 1.1
    ratio: float = 10.0
    power_iterations: int = 30
    seed: int = 0


class ChebyshevSmoother:
    """Jacobi-preconditioned Chebyshev iteration for ``A x = b``."""

    def __init__(self, op: LinearMap, inv_diag: Vector, cfg: ChebyshevConfig,
                 project: LinearMap | None = None, lam_max: float | None = None,
                 interval: tuple[float, float] | None = None):
        if cfg.degree < 1:
            raise ValueError("Chebyshev degree must be >= 1")
        self.op = op
        self.inv_diag = inv_diag
        self.cfg = cfg
        self.project = project or _identity
        if interval is None:
            if lam_max is None:
                lam_max = estimate_spectral_bound(op, inv_diag, cfg.power_iterations, cfg.seed, project)
            hi = cfg.safety * lam_max
            interval = (hi / cfg.ratio, hi)
        lo, hi = interval
        if not (0 < lo <= hi):
            raise ValueError(f"invalid Chebyshev interval {interval}")
        self.lam_max = lam_max
        self.interval = (float(lo), float(hi))

    def apply_polynomial(self, rhs: Vector, x: Vector) -> Vector:
        """One sweep of the degree-``k`` Chebyshev polynomial (``k`` operator applications)."""
        lo, hi = self.interval
        theta = 0.5 * (hi + lo)
        delta = 0.5 * (hi - lo)
        proj = self.project
        r = proj(self.inv_diag * (rhs - self.op(x)))
        if delta == 0.0:
            # degenerate interval: Richardson with the exact step 1/theta
            for k in range(self.cfg.degree):
                x = proj(x + r / theta)
                if k + 1 < self.cfg.degree:
                    r = proj(self.inv_diag * (rhs - self.op(x)))
            return x
        sigma = theta / delta
        rho = 1.0 / sigma
        d = r / theta
        for k in range(self.cfg.degree):
            x = proj(x + d)
            if k + 1 == self.cfg.degree:
                break
            r = proj(r - self.inv_diag * self.op(d))
            rho_new = 1.0 / (2.0 * sigma - rho)
            d = proj(rho_new * rho * d + (2.0 * rho_new / delta) * r)
            rho = rho_new
        return x

    def smooth(self, rhs: Vector, x: Vector, steps: int | None = None) -> Vector:
        for _ in range(self.cfg.steps if steps is None else steps):
            x = self.apply_polynomial(rhs, x)
        return x


def chebyshev_smooth(op: LinearMap, inv_diag: Vector, rhs: Vector, x: Vector,
                     cfg: ChebyshevConfig, interval: tuple[float, float] | None = None,
                     project: LinearMap | None = None) -> Vector:
    """Functional form of :meth:`ChebyshevSmoother.smooth`.

    ``interval`` must be supplied (an estimate can be made with
    :func:`estimate_spectral_bound`).
    """
    if interval is None:
        raise SpectrumError("Chebyshev smoothing needs an estimated spectral interval")
    return ChebyshevSmoother(op, inv_diag, cfg, project, interval=interval).smooth(rhs, x)


# ----------------------------------------------------------------- multigrid

@dataclass
class LevelOperator:
    """Operator data of one multigrid level."""

    op: LinearMap
    diagonal: Vector
    project: LinearMap | None = None

    def __post_init__(self):
        d = np.asarray(self.diagonal, dtype=float)
        safe = np.where(np.abs(d) > 0, d, 1.0)
        self.inv_diag = 1.0 / safe


@dataclass
class VCycleConfig:
    smoother: ChebyshevConfig = field(default_factory=ChebyshevConfig)
    coarse_stop: StoppingRule = field(default_factory=lambda: StoppingRule(rtol=1e-2, maxiter=10000))


class Multigrid:
    """Geometric multigrid V-cycle over levels ``l_min .. l_max``.

    ``levels[0]`` is the coarsest level; ``prolongations[k]`` maps level
    ``k`` to ``k + 1`` and its transpose is the restriction.
    """

    def __init__(self, levels: Sequence[LevelOperator], prolongations: Sequence, cfg: VCycleConfig,
                 lam_max: Sequence[float | None] | None = None):
        if len(prolongations) != len(levels) - 1:
            raise ValueError("need one prolongation per level pair")
        lam_max = list(lam_max) if lam_max is not None else [None] * len(levels)
        self.levels = list(levels)
        self.prolongations = list(prolongations)
        self.restrictions = [p.T.tocsr() if hasattr(p, "tocsr") else p.T for p in prolongations]
        self.cfg = cfg
        # lam_max lets several hierarchies share one set of spectral estimates
        self.smoothers = [None] + [
            ChebyshevSmoother(lv.op, lv.inv_diag, cfg.smoother, lv.project, lam_max=lam)
            for lv, lam in zip(self.levels[1:], lam_max[1:])]
        self.lam_max = [None] + [sm.lam_max for sm in self.smoothers[1:]]
        self.coarse_iterations = 0

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def _proj(self, k, x):
        p = self.levels[k].project
        return p(x) if p is not None else x

    def coarse_solve(self, rhs: Vector) -> Vector:
        lv = self.levels[0]
        x, rep = cg_solve(lv.op, rhs, precond=lambda r: lv.inv_diag * r,
                          stop=self.cfg.coarse_stop, project=lv.project)
        self.coarse_iterations += rep.iterations
        if not rep.converged:
            raise ConvergenceError(f"coarse solve stalled at residual {rep.final_residual:.3e}")
        return x

    def vcycle(self, rhs: Vector, x: Vector | None = None, level: int | None = None) -> Vector:
        k = self.n_levels - 1 if level is None else level
        rhs = self._proj(k, rhs)
        if k == 0:
            if x is None or not np.any(x):
                return self.coarse_solve(rhs)
            lv = self.levels[0]
            return x + self.coarse_solve(self._proj(0, rhs - lv.op(x)))
        lv = self.levels[k]
        sm = self.smoothers[k]
        x = np.zeros_like(rhs) if x is None else self._proj(k, x)
        x = sm.smooth(rhs, x)
        r = self._proj(k, rhs - lv.op(x))
        rc = self._proj(k - 1, self.restrictions[k - 1] @ r)
        ec = self.vcycle(rc, None, k - 1)
        x = self._proj(k, x + self.prolongations[k - 1] @ ec)
        return sm.smooth(rhs, x)

    def __call__(self, rhs: Vector) -> Vector:
        return self.vcycle(rhs)


def vcycle(hierarchy: Multigrid, rhs: Vector, x: Vector | None = None) -> Vector:
    return hierarchy.vcycle(rhs, x)


def coarse_solve(op: LinearMap, diagonal: Vector, rhs: Vector, stop: StoppingRule = StoppingRule(rtol=1e-2),
                 project: LinearMap | None = None) -> Vector:
    """Jacobi-preconditioned CG on the coarsest level (raises if it fails)."""
    inv = 1.0 / np.where(np.abs(diagonal) > 0, diagonal, 1.0)
    x, rep = cg_solve(op, rhs, precond=lambda r: inv * r, stop=stop, project=project)
    if not rep.converged:
        raise ConvergenceError(f"coarse solve stalled at residual {rep.final_residual:.3e}")
    return x
