"""Point location, point evaluation and quadrature-point sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from tala.femcore.reference import basis_values
from tala.femcore.spaces import FieldFunction

OUTSIDE = -1


@dataclass
class Location:
    """Containing micro element and reference coordinates of a batch of points.

    ``element`` is ``OUTSIDE`` (-1) for points outside the physical annulus.
    """

    element: np.ndarray
    reference: np.ndarray

    @property
    def inside(self) -> np.ndarray:
        return self.element != OUTSIDE


def _affine_inverse(vertices, triangles):
    v = vertices[triangles]
    jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=2)
    return v[:, 0], np.linalg.inv(jac)


def _level_inverse(disc, level):
    cache = disc.__dict__.setdefault("_affine_inv", {})
    if level not in cache:
        lev = disc.mesh[level]
        cache[level] = _affine_inverse(lev.vertices, lev.triangles)
    return cache[level]


def locate(disc, level: int, points: np.ndarray, tol: float = 1e-12) -> Location:
    """Find the micro element of ``level`` containing each physical point.

    The blending map is inverted analytically: the physical radius gives the
    macro layer, the angle the sector.  Inside the trapezoid the affine
    coordinates select the macro triangle and the structured micro index.
    Points on shared edges go to the element with the smaller structured
    index, so the choice is deterministic.
    """
    macro = disc.mesh.macro
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    radius = disc.blending.domain_radius(pts)
    span = macro.r_surface - macro.r_cmb
    inside = (radius >= macro.r_cmb - tol * span) & (radius <= macro.r_surface + tol * span)
    # outside points (the origin included) are looked up at a harmless stand-in
    pts = np.where(inside[:, None], pts, macro.vertices[0])
    xt = disc.blending.inverse(pts)
    sector = disc.blending.sector_of(xt)
    # the physical radius equals the corner radius of the polygon ring through x~
    dr = span / macro.n_radial
    layer = np.clip(np.floor((radius - macro.r_cmb) / dr).astype(np.int64), 0, macro.n_radial - 1)
    cand = macro.trapezoid_triangles[layer, sector]  # (n, 2)
    v0, inv = _macro_inverse(disc)
    loc0 = np.einsum("nab,nb->na", inv[cand[:, 0]], xt - v0[cand[:, 0]])
    first = (loc0[:, 0] + loc0[:, 1] <= 1.0 + tol) & (loc0 >= -tol).all(axis=1)
    tri = np.where(first, cand[:, 0], cand[:, 1])
    loc = np.where(first[:, None], loc0,
                   np.einsum("nab,nb->na", inv[cand[:, 1]], xt - v0[cand[:, 1]]))
    n = 2 ** level
    a = np.clip(loc * n, 0.0, n)
    over = a.sum(axis=1) > n
    a[over] *= (n / a[over].sum(axis=1))[:, None]
    ij = np.minimum(np.floor(a).astype(np.int64), n - 1)
    excess = np.maximum(ij.sum(axis=1) - (n - 1), 0)  # only on the hypotenuse
    shift_i = np.minimum(excess, ij[:, 0])
    ij[:, 0] -= shift_i
    ij[:, 1] -= excess - shift_i
    frac = a - ij
    up = (frac.sum(axis=1) <= 1.0) | (ij.sum(axis=1) >= n - 1)
    table = disc.mesh.element_lookup[level]
    elem = table[tri, ij[:, 0], ij[:, 1], up.astype(np.int64)]
    base, einv = _level_inverse(disc, level)
    ref = np.einsum("nab,nb->na", einv[elem], xt - base[elem])
    elem = np.where(inside, elem, OUTSIDE)
    return Location(element=elem, reference=ref)


def _macro_inverse(disc):
    cache = disc.__dict__
    if "_macro_inv" not in cache:
        macro = disc.mesh.macro
        cache["_macro_inv"] = _affine_inverse(macro.vertices, macro.triangles)
    return cache["_macro_inv"]


def evaluate_located(field: FieldFunction, where: Location) -> np.ndarray:
    """Evaluate ``field`` at pre-located points (outside points give NaN)."""
    space = field.space
    elem = np.where(where.inside, where.element, 0)
    phi = basis_values(space.scalar_kind, where.reference)  # (n, nb)
    dofs = space.dofmap[elem]
    if space.n_components == 2:
        vals = field.coefficients.reshape(-1, 2)[dofs]  # (n, nb, 2)
        out = np.einsum("ni,nic->nc", phi, vals)
        out[~where.inside] = np.nan
    else:
        out = np.einsum("ni,ni->n", phi, field.coefficients[dofs])
        out[~where.inside] = np.nan
    return out


def evaluate_at(field: FieldFunction, points: np.ndarray) -> np.ndarray:
    """Evaluate a field at physical points; NaN marks points outside the domain."""
    pts = np.asarray(points, dtype=float)
    where = locate(field.space.disc, field.space.level, pts.reshape(-1, 2))
    out = evaluate_located(field, where)
    return out.reshape(pts.shape[:-1] + out.shape[1:])


def is_outside(disc, points: np.ndarray) -> np.ndarray:
    macro = disc.mesh.macro
    r = disc.blending.domain_radius(points)
    span = macro.r_surface - macro.r_cmb
    return (r < macro.r_cmb - 1e-12 * span) | (r > macro.r_surface + 1e-12 * span)


def quadrature_values(field: FieldFunction, degree: int) -> np.ndarray:
    """Values at the quadrature points of the field's level.

    Returns ``(nE, nq)`` for scalars and ``(2, nE, nq)`` for vectors.
    """
    space = field.space
    geo = space.disc.geometry(space.level, degree)
    phi = basis_values(space.scalar_kind, geo.rule.points)
    if space.n_components == 2:
        c = field.coefficients.reshape(-1, 2)
        return np.stack([c[space.dofmap, k] @ phi.T for k in range(2)])
    return field.coefficients[space.dofmap] @ phi.T


def quadrature_gradients(field: FieldFunction, degree: int) -> np.ndarray:
    """Physical gradients at quadrature points.

    Scalars give ``(2, nE, nq)`` (``[a]`` = derivative along ``x_a``);
    vectors give ``(2, 2, nE, nq)`` with ``[c, a] = ∂u_c/∂x_a``.
    """
    space = field.space
    geo = space.disc.geometry(space.level, degree)
    grad = geo.gradients(space.scalar_kind)  # (nb, 2, nE, nq)
    nb = grad.shape[0]
    if space.n_components == 2:
        c = field.coefficients.reshape(-1, 2)
        out = np.zeros((2, 2) + geo.weights.shape)
        for comp in range(2):
            vals = c[space.dofmap, comp]  # (nE, nb)
            for i in range(nb):
                out[comp] += grad[i] * vals[:, i][None, :, None]
        return out
    vals = field.coefficients[space.dofmap]
    out = np.zeros((2,) + geo.weights.shape)
    for i in range(nb):
        out += grad[i] * vals[:, i][None, :, None]
    return out


def integrate(field: FieldFunction, degree: int = 6) -> float:
    """Quadrature of a scalar field over the blended annulus."""
    geo = field.space.disc.geometry(field.space.level, degree)
    vals = quadrature_values(field, degree)
    if field.space.n_components == 2:
        return np.array([float(np.sum(geo.weights * vals[c])) for c in range(2)])
    return float(np.sum(geo.weights * vals))


def integrate_function(disc, level: int, func, degree: int = 6) -> float:
    """Quadrature of ``func(x)`` (physical coordinates) over the annulus."""
    geo = disc.geometry(level, degree)
    return float(np.sum(geo.weights * func(geo.points)))


def domain_area(disc, level: int | None = None, degree: int = 6) -> float:
    """Quadrature area of the annulus, with the same rule as :func:`integrate`."""
    level = disc.max_level if level is None else level
    return float(disc.geometry(level, degree).weights.sum())


def mass_norm(field: FieldFunction, degree: int = 6) -> float:
    """``sqrt(∫ f²)`` by quadrature (the discrete L² norm)."""
    geo = field.space.disc.geometry(field.space.level, degree)
    vals = quadrature_values(field, degree)
    return float(np.sqrt(np.sum(geo.weights * vals ** 2)))
