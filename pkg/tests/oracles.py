"""Dense assembly used as an independent oracle for the matrix-free operators.

Basis functions come from a Vandermonde solve on the reference nodes, and
element loops are written out plainly, so the only shared ingredients with
the library are the mesh, the blending Jacobian and the quadrature rule.
"""
from __future__ import annotations

import numpy as np

_P2_NODES = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]], dtype=float)
_P1_NODES = _P2_NODES[:3]


def _monomials(kind, p):
    x, y = p
    if kind == "P1":
        return np.array([1, x, y]), np.array([[0, 0], [1, 0], [0, 1]], dtype=float)
    vals = np.array([1, x, y, x * x, x * y, y * y])
    grads = np.array([[0, 0], [1, 0], [0, 1], [2 * x, 0], [y, x], [0, 2 * y]], dtype=float)
    return vals, grads


def _coeffs(kind):
    nodes = _P1_NODES if kind == "P1" else _P2_NODES
    vander = np.array([_monomials(kind, p)[0] for p in nodes])
    return np.linalg.inv(vander)  # column i = coefficients of basis i


def reference_basis(kind, p):
    inv = _coeffs(kind)
    vals, grads = _monomials(kind, p)
    return vals @ inv, (grads.T @ inv).T  # (nb,), (nb, 2)


def element_data(disc, level, degree, kind):
    """Yield ``(element, weights, points, phi, grads)`` with physical gradients."""
    lev = disc.mesh[level]
    rule = disc.geometry(level, degree).rule
    sector = disc.mesh.macro.sector[lev.macro_id]
    for e, tri in enumerate(lev.triangles):
        v = lev.vertices[tri]
        jf = np.column_stack([v[1] - v[0], v[2] - v[0]])
        ws, xs, phis, grads = [], [], [], []
        for p, w in zip(rule.points, rule.weights):
            xt = v[0] + jf @ p
            jb, detb = disc.blending.jacobian(xt[None], np.array([sector[e]]))
            jac = jb[0] @ jf
            phi, gref = reference_basis(kind, p)
            grads.append(gref @ np.linalg.inv(jac))
            ws.append(w * abs(np.linalg.det(jf)) * abs(detb[0]))
            xs.append(disc.blending.blend(xt[None], np.array([sector[e]]), check=False)[0])
            phis.append(phi)
        yield e, np.array(ws), np.array(xs), np.array(phis), np.array(grads)


def dofmap(disc, level, kind):
    lev = disc.mesh[level]
    return lev.triangles if kind == "P1" else lev.p2_dofmap


def assemble_scalar(disc, level, kind, degree, mass=None, stiffness=None, advection=None):
    dm = dofmap(disc, level, kind)
    n = dm.max() + 1
    mat = np.zeros((n, n))
    for e, w, _x, phi, grad in element_data(disc, level, degree, kind):
        loc = np.zeros((len(dm[e]),) * 2)
        for q in range(len(w)):
            if mass is not None:
                loc += w[q] * _at(mass, e, q) * np.outer(phi[q], phi[q])
            if stiffness is not None:
                loc += w[q] * _at(stiffness, e, q) * grad[q] @ grad[q].T
            if advection is not None:
                b = np.array([advection[0][e, q], advection[1][e, q]])
                loc += w[q] * np.outer(phi[q], grad[q] @ b)
        mat[np.ix_(dm[e], dm[e])] += loc
    return mat


def _at(c, e, q):
    return c if np.isscalar(c) else c[e, q]


def assemble_viscous(disc, level, degree, eta):
    dm = dofmap(disc, level, "P2")
    n = 2 * (dm.max() + 1)
    mat = np.zeros((n, n))
    for e, w, _x, _phi, grad in element_data(disc, level, degree, "P2"):
        idx = np.array([[2 * i, 2 * i + 1] for i in dm[e]]).ravel()
        loc = np.zeros((12, 12))
        for q in range(len(w)):
            strains, divs = [], []
            for i in range(6):
                for c in range(2):
                    gu = np.zeros((2, 2))
                    gu[c] = grad[q, i]
                    strains.append(0.5 * (gu + gu.T))
                    divs.append(np.trace(gu))
            for a in range(12):
                for b in range(12):
                    loc[a, b] += w[q] * _at(eta, e, q) * (
                        2 * np.sum(strains[a] * strains[b]) - divs[a] * divs[b])
        mat[np.ix_(idx, idx)] += loc
    return mat


def assemble_coupling(disc, level, degree, div_weight=1.0, drift=None):
    dmv = dofmap(disc, level, "P2")
    dmp = dofmap(disc, level, "P1")
    mat = np.zeros((dmp.max() + 1, 2 * (dmv.max() + 1)))
    p1 = {e: (phi,) for e, _w, _x, phi, _g in element_data(disc, level, degree, "P1")}
    for e, w, _x, phi, grad in element_data(disc, level, degree, "P2"):
        psi = p1[e][0]
        idx = np.array([[2 * i, 2 * i + 1] for i in dmv[e]]).ravel()
        loc = np.zeros((3, 12))
        for q in range(len(w)):
            for i in range(6):
                for c in range(2):
                    val = div_weight * grad[q, i, c]
                    if drift is not None:
                        val += drift[c][e, q] * phi[q, i]
                    loc[:, 2 * i + c] -= w[q] * val * psi[q]
        mat[np.ix_(dmp[e], idx)] += loc
    return mat


def assemble_vector_mass(disc, level, degree, coef):
    scalar = assemble_scalar(disc, level, "P2", degree, mass=coef)
    return np.kron(scalar, np.eye(2))


def dense_matrix(op) -> np.ndarray:
    """Column-by-column matrix of a matrix-free operator."""
    n_rows, n_cols = op.shape
    out = np.empty((n_rows, n_cols))
    e = np.zeros(n_cols)
    for j in range(n_cols):
        e[j] = 1.0
        out[:, j] = op.apply(e)
        e[j] = 0.0
    return out


def relative_difference(a, b) -> float:
    scale = np.abs(b).max()
    return float(np.abs(a - b).max() / (scale if scale > 0 else 1.0))
