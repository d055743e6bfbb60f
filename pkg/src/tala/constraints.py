"""Boundary constraints: surface Dirichlet rows, CMB free slip, zero-mean pressure."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from tala.femcore.evaluation import domain_area, integrate
from tala.femcore.spaces import ContractViolation, FieldFunction, FunctionSpace


def _coeffs(x):
    return x.coefficients if isinstance(x, FieldFunction) else np.asarray(x, dtype=float)


def _wrap(x, values):
    return FieldFunction(x.space, values) if isinstance(x, FieldFunction) else values


def cmb_normals(space: FunctionSpace) -> np.ndarray:
    """Exact outward normals of the inner circle at the CMB nodes of ``space``.

    The domain's outward normal at the CMB points towards the origin; since
    the projection only uses ``n n^T`` the sign is irrelevant and ``x/|x|``
    is returned.
    """
    x = space.nodes[space.cmb_nodes]
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def apply_freeslip(u, space: FunctionSpace | None = None):
    """Remove the normal component ``(u.n) n`` at every CMB node."""
    space = u.space if isinstance(u, FieldFunction) else space
    if space is None or space.kind != "P2vec":
        raise ContractViolation("free slip acts on the P2 vector space")
    vals = _coeffs(u).reshape(-1, 2).copy()
    idx = space.cmb_nodes
    n = cmb_normals(space)
    un = np.einsum("nc,nc->n", vals[idx], n)
    vals[idx] -= un[:, None] * n
    return _wrap(u, vals.ravel())


def apply_zero_mean(p):
    """Subtract the arithmetic mean of the coefficient vector."""
    vals = _coeffs(p)
    return _wrap(p, vals - vals.mean())


def pressure_shift_constant(p: FieldFunction) -> float:
    """``c_p`` with ``∫ (p + c_p) = 0``."""
    return -integrate(p) / domain_area(p.space.disc, p.space.level)


@dataclass
class BoundaryConditionSet:
    """Surface velocity and boundary temperatures (nondimensional).

    ``surface_velocity`` maps physical points ``(n, 2)`` to velocities; ``None``
    means no slip.
    """

    surface_velocity: Callable[[np.ndarray], np.ndarray] | None = None
    t_surface: float = 0.0
    t_cmb: float = 1.0

    def surface_interpolant(self, space: FunctionSpace) -> np.ndarray:
        """Vector of the velocity space holding ``I_h u_Surface`` on surface rows."""
        out = np.zeros((space.n_nodes, 2))
        if self.surface_velocity is not None:
            idx = space.surface_nodes
            out[idx] = np.asarray(self.surface_velocity(space.nodes[idx]), dtype=float)
        return out.ravel()

    def surface_tangency_defect(self, space: FunctionSpace) -> float:
        """``max |u_Surface . n|`` over surface nodes."""
        if self.surface_velocity is None:
            return 0.0
        idx = space.surface_nodes
        x = space.nodes[idx]
        u = np.asarray(self.surface_velocity(x), dtype=float)
        n = x / np.linalg.norm(x, axis=1, keepdims=True)
        return float(np.max(np.abs(np.einsum("nc,nc->n", u, n))))

    def temperature_values(self, space: FunctionSpace) -> np.ndarray:
        """Dirichlet temperature vector: boundary values on boundary rows, zero elsewhere."""
        out = np.zeros(space.dim)
        out[space.surface_nodes] = self.t_surface
        out[space.cmb_nodes] = self.t_cmb
        return out


class ProjectionOperator:
    """Projection onto the constrained velocity or pressure subspace.

    ``kind`` is ``"freeslip"`` (CMB normal removal only), ``"velocity"``
    (free slip plus zeroed surface rows, the space of solver corrections),
    ``"zero_mean"`` (pressure) or ``"dirichlet"`` (zero the boundary rows of
    a scalar space, used for temperature corrections).
    """

    KINDS = ("freeslip", "velocity", "zero_mean", "dirichlet")

    def __init__(self, kind: str, space: FunctionSpace):
        if kind not in self.KINDS:
            raise ValueError(f"unknown projection {kind!r}")
        self.kind = kind
        self.space = space
        if kind in ("freeslip", "velocity"):
            if space.kind != "P2vec":
                raise ContractViolation("velocity projections need the P2 vector space")
            self._cmb = space.cmb_nodes
            self._n = cmb_normals(space)
            self._surface = np.concatenate([2 * space.surface_nodes, 2 * space.surface_nodes + 1])
        elif kind == "dirichlet":
            self._fixed = space.boundary_nodes

    def __call__(self, x):
        vals = _coeffs(x)
        if self.kind == "zero_mean":
            return _wrap(x, vals - vals.mean())
        out = vals.copy()
        if self.kind == "dirichlet":
            out[self._fixed] = 0.0
            return _wrap(x, out)
        if self.kind == "velocity":
            out[self._surface] = 0.0
        v = out.reshape(-1, 2)
        un = np.einsum("nc,nc->n", v[self._cmb], self._n)
        v[self._cmb] -= un[:, None] * self._n
        return _wrap(x, out)

    apply = __call__

    def mask(self) -> np.ndarray:
        """Indicator of rows left untouched by the projection (for diagonals)."""
        m = np.ones(self.space.dim)
        if self.kind == "velocity":
            m[self._surface] = 0.0
        elif self.kind == "dirichlet":
            m[self._fixed] = 0.0
        return m


def eliminate_dirichlet(apply_a, apply_bbar, f: np.ndarray, g: np.ndarray, u_int: np.ndarray,
                        velocity_projection: ProjectionOperator,
                        pressure_projection: ProjectionOperator | None = None):
    """Reduced right-hand sides with the surface interpolant moved to the right.

    Returns ``(P_v(f - A u_int) on CMB/inner rows, P_p(g - B̄ u_int))``.  Surface
    rows of the returned velocity part are zero; the full solution is
    ``u_int + correction``.
    """
    fu = velocity_projection(f - apply_a(u_int))
    gp = g - apply_bbar(u_int)
    if pressure_projection is not None:
        gp = pressure_projection(gp)
    return fu, gp
