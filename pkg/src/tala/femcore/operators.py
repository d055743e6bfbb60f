"""Matrix-free bilinear forms.

Every operator works on flat coefficient vectors (vector fields interleaved)
and is evaluated element by element from the cached quadrature geometry:
gather local coefficients, evaluate at quadrature points, weight, test
against the basis and scatter back with ``np.bincount``.  No matrix is ever
formed; dense assembly lives in the test-suite only.

Coefficients are given either as scalars or as ``(n_elements, n_points)``
arrays sampled at the quadrature points of the operator's rule.
"""
from __future__ import annotations

import enum

import numpy as np
from scipy.sparse.linalg import LinearOperator

from tala.femcore import kernels
from tala.femcore.parallel import element_reduce
from tala.femcore.spaces import ContractViolation, FieldFunction, FunctionSpace

# quadrature exactness used by default for each family of forms
DEGREE_MASS = 6
DEGREE_COUPLING = 4


class OperatorTag(enum.Enum):
    VISCOUS = "A"
    DIVERGENCE = "B"
    DENSITY_GRADIENT = "C"
    DIVERGENCE_DENSITY = "B+C"
    GRADIENT = "B^T"
    MASS_INV_ETA = "M_1/eta"
    MASS_SQRT_ETA = "M_sqrt(eta)"
    STIFF_INV_SQRT_ETA = "K_1/sqrt(eta)"
    ENERGY_LHS = "energy"
    PLAIN_MASS = "M"
    PLAIN_STIFFNESS = "K"
    VECTOR_MASS = "M_vec"
    SCALAR_FORM = "scalar"


def _part(c, sl):
    if c is None or np.isscalar(c):
        return c
    return c[..., sl, :]


_DUMMY2 = np.zeros((1, 1))
_DUMMY3 = np.zeros((1, 1, 1))


def _weighted(c, w):
    """Coefficient times quadrature weights as a contiguous array (or a dummy)."""
    if c is None:
        return _DUMMY2
    return np.ascontiguousarray(np.broadcast_to(c * w, w.shape), dtype=float)


def _weighted_vec(b, w):
    if b is None:
        return _DUMMY3
    return np.ascontiguousarray(np.asarray(b) * w[None], dtype=float)


def _check_coef(c, shape, name):
    if c is None or np.isscalar(c):
        return c
    c = np.asarray(c, dtype=float)
    if c.shape[-2:] != shape:
        raise ContractViolation(f"coefficient {name} has shape {c.shape}, expected (..., {shape[0]}, {shape[1]})")
    return c


class Operator:
    """Base class: ``apply`` and, for square forms, ``diagonal``."""

    tag: OperatorTag = OperatorTag.SCALAR_FORM

    def __init__(self, domain: FunctionSpace, range_: FunctionSpace, degree: int):
        self.domain = domain
        self.range = range_
        self.degree = degree
        self.level = domain.level
        self.disc = domain.disc
        self.geometry = self.disc.geometry(self.level, degree)
        self._per_macro = 4 ** self.level

    @property
    def square(self) -> bool:
        return self.domain is self.range

    @property
    def shape(self) -> tuple[int, int]:
        return self.range.dim, self.domain.dim

    def _reduce(self, kernel):
        return element_reduce(kernel, self.geometry.n_elements, self._per_macro)

    def apply(self, x):
        if isinstance(x, FieldFunction):
            if x.space is not self.domain:
                raise ContractViolation(f"{self.tag.value} expects {self.domain}, got {x.space}")
            return FieldFunction(self.range, self._apply(x.coefficients))
        x = np.asarray(x, dtype=float)
        if x.shape != (self.domain.dim,):
            raise ContractViolation(f"{self.tag.value} expects a vector of length {self.domain.dim}, got {x.shape}")
        return self._apply(x)

    __call__ = apply

    def __matmul__(self, x):
        return self.apply(x)

    def _apply(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def diagonal(self) -> np.ndarray:
        if not self.square:
            raise ContractViolation(f"{self.tag.value} is not square")
        return self._diagonal()

    def _diagonal(self) -> np.ndarray:
        raise NotImplementedError

    def as_linear_operator(self) -> LinearOperator:
        return LinearOperator(self.shape, matvec=lambda v: self._apply(np.ravel(v)), dtype=float)


class ScalarOperator(Operator):
    """``∫ m T w + ∫ s ∇T·∇w + ∫ (b·∇T) w`` on a scalar P1 or P2 space.

    Parameters
    ----------
    space : FunctionSpace
        Scalar space (``"P1"`` or ``"P2"``).
    mass, stiffness : float or array, optional
        Reaction and diffusion coefficients at the quadrature points.
    advection : array, optional
        ``(2, n_elements, n_points)`` transport velocity at the quadrature points.
    """

    def __init__(self, space: FunctionSpace, mass=None, stiffness=None, advection=None,
                 degree: int = DEGREE_MASS, tag: OperatorTag = OperatorTag.SCALAR_FORM):
        if space.n_components != 1:
            raise ContractViolation("ScalarOperator needs a scalar space")
        super().__init__(space, space, degree)
        self.tag = tag
        g = self.geometry
        shape = (g.n_elements, g.n_points)
        self.mass = _check_coef(mass, shape, "mass")
        self.stiffness = _check_coef(stiffness, shape, "stiffness")
        self.advection = _check_coef(advection, shape, "advection")
        self._phi = g.values(space.scalar_kind)
        self._dofs_t = np.ascontiguousarray(space.dofmap.T)

    def _compiled(self):
        if not hasattr(self, "_cw"):
            w = self.geometry.weights
            self._cw = (_weighted(self.mass, w), _weighted(self.stiffness, w), _weighted_vec(self.advection, w))
        return self._cw

    def _kernel(self, x, sl):
        mw, sw, bw = self._compiled()
        out = np.zeros(self.domain.dim)
        grad = self.geometry.local_gradients(self.domain.scalar_kind)
        kernels.scalar_apply(x, self._dofs_t, self._phi, grad, mw, sw, bw, self.mass is not None,
                             self.stiffness is not None, self.advection is not None, sl.start, sl.stop, out)
        return out

    def _apply(self, x):
        return self._reduce(lambda sl: self._kernel(x, sl))

    def _diag_kernel(self, sl):
        g = self.geometry
        dofs = self._dofs_t[:, sl]
        w = g.weights[sl]
        nb = dofs.shape[0]
        local = np.zeros((nb, w.shape[0]))
        if self.mass is not None:
            mw = _part(self.mass, sl) * w
            local += (np.broadcast_to(mw, w.shape) @ (self._phi ** 2)).T
        if self.stiffness is not None or self.advection is not None:
            grad = g.gradients(self.domain.scalar_kind)[:, :, sl]
        if self.stiffness is not None:
            sw = _part(self.stiffness, sl) * w
            for i in range(nb):
                local[i] += (sw * (grad[i, 0] ** 2 + grad[i, 1] ** 2)).sum(axis=1)
        if self.advection is not None:
            b = _part(self.advection, sl)
            for i in range(nb):
                local[i] += (w * self._phi[:, i] * (b[0] * grad[i, 0] + b[1] * grad[i, 1])).sum(axis=1)
        return np.bincount(dofs.ravel(), local.ravel(), minlength=self.domain.dim)

    def _diagonal(self):
        return self._reduce(self._diag_kernel)

    def symmetric_part(self) -> "ScalarOperator":
        """The same form without the transport term."""
        return ScalarOperator(self.domain, mass=self.mass, stiffness=self.stiffness,
                              degree=self.degree, tag=self.tag)


class VectorMass(Operator):
    """Component-wise weighted mass ``∫ c u·v`` on the P2 vector space."""

    tag = OperatorTag.VECTOR_MASS

    def __init__(self, space: FunctionSpace, coefficient=1.0, degree: int = DEGREE_MASS,
                 tag: OperatorTag = OperatorTag.VECTOR_MASS):
        if space.kind != "P2vec":
            raise ContractViolation("VectorMass needs the P2 vector space")
        super().__init__(space, space, degree)
        self.tag = tag
        scalar = space.disc.space("P2", space.level)
        self._scalar = ScalarOperator(scalar, mass=coefficient, degree=degree)
        self._mw = _weighted(self._scalar.mass, self.geometry.weights)
        self._phi = self.geometry.values("P2")
        self._dofs_t = np.ascontiguousarray(space.dofmap.T)

    def _kernel(self, x, sl):
        out = np.zeros(self.domain.dim)
        kernels.vector_mass_apply(x, self._dofs_t, self._phi, self._mw, sl.start, sl.stop, out)
        return out

    def _apply(self, x):
        return self._reduce(lambda sl: self._kernel(x, sl))

    def _diagonal(self):
        return np.repeat(self._scalar._diagonal(), 2)


class ViscousOperator(Operator):
    """Deviatoric viscous form ``∫ 2η ε(u):ε(v) − η div u div v`` (2D)."""

    tag = OperatorTag.VISCOUS

    def __init__(self, space: FunctionSpace, viscosity, degree: int = DEGREE_MASS):
        if space.kind != "P2vec":
            raise ContractViolation("ViscousOperator needs the P2 vector space")
        super().__init__(space, space, degree)
        g = self.geometry
        self.viscosity = _check_coef(viscosity, (g.n_elements, g.n_points), "viscosity")
        self._dofs_t = np.ascontiguousarray(space.dofmap.T)

    def _kernel(self, x, sl):
        if not hasattr(self, "_ew"):
            self._ew = _weighted(self.viscosity, self.geometry.weights)
        out = np.zeros(self.domain.dim)
        kernels.viscous_apply(x, self._dofs_t, self.geometry.local_gradients("P2"), self._ew, sl.start, sl.stop, out)
        return out

    def _apply(self, x):
        return self._reduce(lambda sl: self._kernel(x, sl))

    def _diag_kernel(self, sl):
        g = self.geometry
        dofs = self._dofs_t[:, sl]
        grad = g.gradients("P2")[:, :, sl]
        e = _part(self.viscosity, sl) * g.weights[sl]
        local = np.stack([(e * (grad[i, 0] ** 2 + grad[i, 1] ** 2)).sum(axis=1) for i in range(6)])
        return np.bincount(dofs.ravel(), local.ravel(), minlength=self.domain.n_nodes)

    def _diagonal(self):
        return np.repeat(self._reduce(self._diag_kernel), 2)


class CouplingOperator(Operator):
    """``q ↦ −∫ (d·div u + β·u) q`` from P2 vectors to P1 pressures.

    ``d = 1, β = 0`` is the divergence ``B``; ``d = 0, β = ∇ln ρ`` the density
    term ``C``; both together the compressible constraint ``B + C``.
    """

    def __init__(self, velocity: FunctionSpace, pressure: FunctionSpace, div_weight: float = 1.0,
                 drift=None, degree: int = DEGREE_COUPLING, tag: OperatorTag | None = None):
        if velocity.kind != "P2vec" or pressure.kind != "P1" or velocity.level != pressure.level:
            raise ContractViolation("coupling operators map P2 vectors to P1 on the same level")
        super().__init__(velocity, pressure, degree)
        g = self.geometry
        self.div_weight = float(div_weight)
        self.drift = _check_coef(drift, (g.n_elements, g.n_points), "drift")
        if tag is None:
            if self.drift is None:
                tag = OperatorTag.DIVERGENCE
            elif self.div_weight == 0.0:
                tag = OperatorTag.DENSITY_GRADIENT
            else:
                tag = OperatorTag.DIVERGENCE_DENSITY
        self.tag = tag
        self._phi2 = g.values("P2")
        self._psi = g.values("P1")
        self._vdofs = np.ascontiguousarray(velocity.dofmap.T)
        self._pdofs = np.ascontiguousarray(pressure.dofmap.T)

    def _compiled(self):
        if not hasattr(self, "_cw"):
            w = self.geometry.weights
            dw = _weighted(self.div_weight if self.div_weight != 0.0 else None, w)
            self._cw = (dw, _weighted_vec(self.drift, w))
        return self._cw

    def _args(self):
        dw, bw = self._compiled()
        return (self._vdofs, self._pdofs, self._phi2, self._psi, self.geometry.local_gradients("P2"), dw, bw,
                self.div_weight != 0.0, self.drift is not None)

    def _kernel(self, x, sl):
        out = np.zeros(self.range.dim)
        kernels.coupling_apply(x, *self._args(), sl.start, sl.stop, out)
        return out

    def _apply(self, x):
        return self._reduce(lambda sl: self._kernel(x, sl))

    def _transpose_kernel(self, p, sl):
        out = np.zeros(self.domain.dim)
        kernels.coupling_transpose(p, *self._args(), sl.start, sl.stop, out)
        return out

    def apply_transpose(self, p):
        if isinstance(p, FieldFunction):
            if p.space is not self.range:
                raise ContractViolation(f"transpose expects {self.range}, got {p.space}")
            return FieldFunction(self.domain, self.apply_transpose(p.coefficients))
        p = np.asarray(p, dtype=float)
        if p.shape != (self.range.dim,):
            raise ContractViolation("pressure vector has the wrong length")
        return self._reduce(lambda sl: self._transpose_kernel(p, sl))

    @property
    def T(self) -> "TransposedOperator":
        return TransposedOperator(self)


class TransposedOperator(Operator):
    """Adjoint of a coupling operator, e.g. the gradient ``B^T``."""

    def __init__(self, op: CouplingOperator):
        self.op = op
        self.domain = op.range
        self.range = op.domain
        self.degree = op.degree
        self.level = op.level
        self.disc = op.disc
        self.geometry = op.geometry
        self._per_macro = op._per_macro
        self.tag = OperatorTag.GRADIENT if op.tag == OperatorTag.DIVERGENCE else op.tag

    def _apply(self, x):
        return self.op.apply_transpose(x)


# ---------------------------------------------------------------- factories

def viscous_operator(disc, level, viscosity, degree=DEGREE_MASS) -> ViscousOperator:
    return ViscousOperator(disc.space("P2vec", level), viscosity, degree)


def divergence_operator(disc, level, grad_ln_rho=None, include_density=False) -> CouplingOperator:
    """``B`` or, with ``include_density``, the compressible ``B + C``."""
    drift = grad_ln_rho if include_density else None
    return CouplingOperator(disc.space("P2vec", level), disc.space("P1", level), 1.0, drift)


def density_gradient_operator(disc, level, grad_ln_rho) -> CouplingOperator:
    return CouplingOperator(disc.space("P2vec", level), disc.space("P1", level), 0.0, grad_ln_rho)


def gradient_operator(disc, level) -> TransposedOperator:
    return divergence_operator(disc, level).T


def mass_operator(space, coefficient=1.0, degree=DEGREE_MASS, tag=OperatorTag.PLAIN_MASS) -> Operator:
    if space.kind == "P2vec":
        return VectorMass(space, coefficient, degree, tag=tag)
    return ScalarOperator(space, mass=coefficient, degree=degree, tag=tag)


def stiffness_operator(space, coefficient=1.0, degree=DEGREE_MASS, tag=OperatorTag.PLAIN_STIFFNESS) -> ScalarOperator:
    return ScalarOperator(space, stiffness=coefficient, degree=degree, tag=tag)


def energy_operator(space, *, s_new, tau, conductivity, rho, grad_ln_rho, velocity=None,
                    gravity=None, reaction=0.0, include_advection=False,
                    degree=DEGREE_MASS) -> ScalarOperator:
    """Left-hand side of the weak temperature step.

    ``s T w + τ ( [u·∇T w] + c ∇T·∇(w/ρ) − r T (u·g) w )`` with
    ``∇(w/ρ) = (∇w − w ∇ln ρ)/ρ``; ``c = k/(Pe C^p)`` and ``r = Di α / C^p``.
    ``rho`` is sampled at quadrature points, ``grad_ln_rho``, ``velocity``
    and ``gravity`` as ``(2, nE, nq)`` arrays.
    """
    g = space.disc.geometry(space.level, degree)
    shape = (g.n_elements, g.n_points)
    c_over_rho = tau * conductivity / np.broadcast_to(rho, shape)
    mass = np.full(shape, float(s_new))
    if velocity is not None and reaction:
        mass = mass - tau * reaction * (velocity[0] * gravity[0] + velocity[1] * gravity[1])
    adv = -c_over_rho * np.asarray(grad_ln_rho)
    if include_advection and velocity is not None:
        adv = adv + tau * np.asarray(velocity)
    return ScalarOperator(space, mass=mass, stiffness=c_over_rho, advection=adv,
                          degree=degree, tag=OperatorTag.ENERGY_LHS)


def assemble_load(space: FunctionSpace, values, degree: int = DEGREE_MASS) -> np.ndarray:
    """Load vector ``∫ f·φ_i`` for ``f`` sampled at quadrature points.

    ``values`` is ``(nE, nq)`` for scalar spaces and ``(2, nE, nq)`` for the
    vector space.
    """
    geo = space.disc.geometry(space.level, degree)
    phi = geo.values(space.scalar_kind)
    dofs = space.dofmap.ravel()
    if space.n_components == 2:
        out = np.empty((space.n_nodes, 2))
        for c in range(2):
            local = (values[c] * geo.weights) @ phi
            out[:, c] = np.bincount(dofs, local.ravel(), minlength=space.n_nodes)
        return out.ravel()
    local = (values * geo.weights) @ phi
    return np.bincount(dofs, local.ravel(), minlength=space.n_nodes)


def apply(op: Operator, x):
    """Apply ``op`` to a FieldFunction or coefficient vector."""
    return op.apply(x)


def diagonal(op: Operator) -> np.ndarray:
    return op.diagonal()
