"""Function spaces, field functions and the per-level quadrature geometry."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from tala.geometry import CMB, INNER, SURFACE, BlendingMap, RefinedMesh, refine, build_annulus_macro_mesh
from tala.femcore.reference import QuadratureRule, basis_gradients, basis_values, triangle_rule

SPACE_KINDS = ("P1", "P2", "P2vec")


class ContractViolation(ValueError):
    """An operand does not live in the space or on the level an operation expects."""


class QuadGeometry:
    """Quadrature points, weights and physical basis gradients of one level.

    Integrals over a blended element are pulled back to the reference
    triangle through the affine map ``F`` and the blending map ``B``:
    weights carry ``|det J_F| |det J_B|`` and gradients are mapped by
    ``(J_B J_F)^{-T}``.
    """

    def __init__(self, mesh: RefinedMesh, level: int, degree: int):
        self.level = level
        self.rule: QuadratureRule = triangle_rule(degree)
        lev = mesh[level]
        v = lev.vertices[lev.triangles]
        jac_f = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)  # (nE, 2, 2)
        det_f = jac_f[:, 0, 0] * jac_f[:, 1, 1] - jac_f[:, 0, 1] * jac_f[:, 1, 0]
        self.sector = mesh.macro.sector[lev.macro_id]
        x_ref = v[:, None, 0, :] + np.einsum("eab,qb->eqa", jac_f, self.rule.points)
        self.unblended_points = x_ref
        sector = np.broadcast_to(self.sector[:, None], x_ref.shape[:2])
        jac_b, det_b = mesh.blending.jacobian(x_ref, sector)
        self.points = mesh.blending.blend(x_ref, sector, check=False)
        jac = jac_b @ jac_f[:, None]
        self.jac_inv_t = np.linalg.inv(jac).transpose(0, 1, 3, 2)
        self.weights = self.rule.weights[None, :] * np.abs(det_f)[:, None] * np.abs(det_b)
        self.n_elements, self.n_points = self.weights.shape

    def values(self, kind: str) -> np.ndarray:
        """Reference basis values ``(nq, nb)``; identical on every element."""
        return basis_values("P1" if kind == "P1" else "P2", self.rule.points)

    def _physical_gradients(self, kind):
        ref = basis_gradients(kind, self.rule.points)
        return np.ascontiguousarray(np.einsum("eqab,qib->iaeq", self.jac_inv_t, ref))

    @cached_property
    def grad_p1(self) -> np.ndarray:
        return self._physical_gradients("P1")

    @cached_property
    def grad_p2(self) -> np.ndarray:
        return self._physical_gradients("P2")

    @cached_property
    def local_grad_p1(self) -> np.ndarray:
        return np.ascontiguousarray(self.grad_p1.transpose(2, 3, 0, 1))

    @cached_property
    def local_grad_p2(self) -> np.ndarray:
        return np.ascontiguousarray(self.grad_p2.transpose(2, 3, 0, 1))

    def local_gradients(self, kind: str) -> np.ndarray:
        """Element-major copy ``(nE, nq, nb, 2)`` used by the compiled kernels."""
        return self.local_grad_p1 if kind == "P1" else self.local_grad_p2

    def gradients(self, kind: str) -> np.ndarray:
        """Physical basis gradients laid out as ``(nb, 2, nE, nq)``."""
        return self.grad_p1 if kind == "P1" else self.grad_p2


class Discretisation:
    """A refined annulus mesh together with cached quadrature geometry."""

    def __init__(self, mesh: RefinedMesh):
        self.mesh = mesh
        self.blending: BlendingMap = mesh.blending
        self._geometry: dict[tuple[int, int], QuadGeometry] = {}
        self._spaces: dict[tuple[str, int], FunctionSpace] = {}

    @classmethod
    def annulus(cls, n_tangential=8, n_radial=2, r_cmb=1.2037, r_surface=2.2037,
                max_level=3, blending=True) -> "Discretisation":
        macro = build_annulus_macro_mesh(n_tangential, n_radial, r_cmb, r_surface)
        bmap = BlendingMap.for_mesh(macro, enabled=blending)
        return cls(refine(macro, max_level, bmap))

    @property
    def max_level(self) -> int:
        return self.mesh.max_level

    @property
    def r_cmb(self) -> float:
        return self.mesh.macro.r_cmb

    @property
    def r_surface(self) -> float:
        return self.mesh.macro.r_surface

    def geometry(self, level: int, degree: int) -> QuadGeometry:
        key = (level, degree)
        if key not in self._geometry:
            self._geometry[key] = QuadGeometry(self.mesh, level, degree)
        return self._geometry[key]

    def space(self, kind: str, level: int) -> "FunctionSpace":
        key = (kind, level)
        if key not in self._spaces:
            self._spaces[key] = FunctionSpace(self, kind, level)
        return self._spaces[key]

    def release(self, level: int) -> None:
        """Drop cached quadrature data of ``level`` (memory control)."""
        for key in [k for k in self._geometry if k[0] == level]:
            del self._geometry[key]


class FunctionSpace:
    """Continuous Lagrange space of one kind on one refinement level."""

    def __init__(self, disc: Discretisation, kind: str, level: int):
        if kind not in SPACE_KINDS:
            raise ValueError(f"unknown space kind {kind!r}")
        if not 0 <= level <= disc.max_level:
            raise ValueError(f"level {level} outside 0..{disc.max_level}")
        self.disc = disc
        self.kind = kind
        self.level = level
        lev = disc.mesh[level]
        self.mesh_level = lev
        if kind == "P1":
            self.dofmap = lev.triangles
            self.node_tags = lev.vertex_tags
            self._unblended = lev.vertices
        else:
            self.dofmap = lev.p2_dofmap
            self.node_tags = lev.p2_tags
            self._unblended = lev.p2_coordinates
        self.n_nodes = len(self.node_tags)
        self.n_components = 2 if kind == "P2vec" else 1
        self.dim = self.n_nodes * self.n_components
        self.scalar_kind = "P1" if kind == "P1" else "P2"

    def __repr__(self):
        return f"FunctionSpace({self.kind}, level={self.level}, dim={self.dim})"

    @cached_property
    def nodes(self) -> np.ndarray:
        """Physical (blended) node coordinates."""
        return self.disc.blending.blend(self._unblended, check=False)

    @property
    def unblended_nodes(self) -> np.ndarray:
        return self._unblended

    @cached_property
    def surface_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_tags == SURFACE)

    @cached_property
    def cmb_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_tags == CMB)

    @cached_property
    def inner_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_tags == INNER)

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_tags != INNER)

    @cached_property
    def vector_dofmap(self) -> np.ndarray:
        """``(nE, nb, 2)`` interleaved dof indices of the vector space."""
        return 2 * self.dofmap[:, :, None] + np.arange(2)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.dim)

    def interpolate(self, func) -> np.ndarray:
        """Nodal interpolant of ``func(x)`` given physical coordinates ``(n, 2)``."""
        vals = np.asarray(func(self.nodes), dtype=float)
        if self.n_components == 2:
            vals = np.broadcast_to(vals, (self.n_nodes, 2))
        else:
            vals = np.broadcast_to(vals, (self.n_nodes,))
        return np.ascontiguousarray(vals).reshape(-1).copy()

    def function(self, coefficients=None) -> "FieldFunction":
        coeffs = self.zeros() if coefficients is None else np.asarray(coefficients, dtype=float)
        return FieldFunction(self, coeffs)


@dataclass
class FieldFunction:
    """Coefficient vector tagged with its function space.

    Vector fields are stored interleaved: ``(u0_x, u0_y, u1_x, ...)``.
    """

    space: FunctionSpace
    coefficients: np.ndarray

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.coefficients.shape != (self.space.dim,):
            raise ContractViolation(
                f"coefficient vector of length {self.coefficients.size} does not match {self.space}")

    @property
    def values(self) -> np.ndarray:
        if self.space.n_components == 2:
            return self.coefficients.reshape(-1, 2)
        return self.coefficients

    def copy(self) -> "FieldFunction":
        return FieldFunction(self.space, self.coefficients.copy())

    def __add__(self, other):
        _same_space(self, other)
        return FieldFunction(self.space, self.coefficients + other.coefficients)

    def __sub__(self, other):
        _same_space(self, other)
        return FieldFunction(self.space, self.coefficients - other.coefficients)

    def __mul__(self, scalar):
        return FieldFunction(self.space, self.coefficients * scalar)

    __rmul__ = __mul__


def _same_space(a: FieldFunction, b: FieldFunction):
    if a.space.kind != b.space.kind or a.space.level != b.space.level:
        raise ContractViolation(f"{a.space} and {b.space} differ")
