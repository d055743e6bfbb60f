"""Grid transfer between adjacent levels.

Prolongation is nodal interpolation in the unblended reference domain, which
is an exact embedding because the levels are nested and every function is
a piecewise polynomial composed with the inverse blending map.  Restriction
is the transpose.  The interpolation weights are exact dyadic rationals, so
the matrices are stored as (small) scipy sparse matrices.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from tala.femcore.reference import p2_values
from tala.femcore.spaces import ContractViolation, FieldFunction
from tala.geometry import CHILD_VERTEX_BARY

# local edges of a triangle, matching the P2 basis ordering
_EDGES = ((0, 1), (1, 2), (2, 0))


def _p1_prolongation(coarse, fine):
    nv = coarse.n_vertices
    ne = coarse.n_edges
    rows = np.concatenate([np.arange(nv), nv + np.repeat(np.arange(ne), 2)])
    cols = np.concatenate([np.arange(nv), coarse.edges.ravel()])
    vals = np.concatenate([np.ones(nv), np.full(2 * ne, 0.5)])
    return sp.csr_matrix((vals, (rows, cols)), shape=(fine.n_vertices, nv))


def _p2_prolongation(coarse, fine):
    n_c = coarse.n_p2
    n_f = fine.n_p2
    # coarse P2 nodes are exactly the fine vertices
    rows = [np.arange(n_c)]
    cols = [np.arange(n_c)]
    vals = [np.ones(n_c)]
    nE = coarse.n_elements
    fine_tri_edges = fine.tri_edges.reshape(nE, 4, 3)
    cdofs = coarse.p2_dofmap
    owner_edge, owner_elem, owner_bary = [], [], []
    for child in range(4):
        for k, (a, b) in enumerate(_EDGES):
            bary = 0.5 * (CHILD_VERTEX_BARY[child, a] + CHILD_VERTEX_BARY[child, b])
            owner_edge.append(fine_tri_edges[:, child, k])
            owner_elem.append(np.arange(nE))
            owner_bary.append(np.broadcast_to(bary, (nE, 3)))
    edge = np.concatenate(owner_edge)
    elem = np.concatenate(owner_elem)
    bary = np.concatenate(owner_bary)
    # every fine edge is seen from one or two coarse elements; keep the first
    edge, first = np.unique(edge, return_index=True)
    elem = elem[first]
    bary = bary[first]
    phi = p2_values(bary[:, 1:])  # reference coords are (λ1, λ2)
    phi[np.abs(phi) < 1e-14] = 0.0
    rows.append(np.repeat(fine.n_vertices + edge, 6))
    cols.append(cdofs[elem].ravel())
    vals.append(phi.ravel())
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n_f, n_c)).tocsr()
    mat.eliminate_zeros()
    return mat


def prolongation_matrix(disc, kind: str, coarse_level: int) -> sp.csr_matrix:
    """Sparse matrix of the prolongation ``coarse_level -> coarse_level + 1``."""
    if not 0 <= coarse_level < disc.max_level:
        raise ContractViolation(f"no level above {coarse_level}")
    cache = disc.__dict__.setdefault("_transfer", {})
    key = (kind, coarse_level)
    if key not in cache:
        coarse, fine = disc.mesh[coarse_level], disc.mesh[coarse_level + 1]
        if kind == "P1":
            mat = _p1_prolongation(coarse, fine)
        else:
            mat = _p2_prolongation(coarse, fine)
            if kind == "P2vec":
                mat = sp.kron(mat, sp.identity(2, format="csr"), format="csr")
        cache[key] = (mat, mat.T.tocsr())
    return cache[key][0]


def restriction_matrix(disc, kind: str, coarse_level: int) -> sp.csr_matrix:
    prolongation_matrix(disc, kind, coarse_level)
    return disc._transfer[(kind, coarse_level)][1]


def prolongate(coarse: FieldFunction, fine_level: int | None = None) -> FieldFunction:
    space = coarse.space
    if fine_level is None:
        fine_level = space.level + 1
    if fine_level != space.level + 1:
        raise ContractViolation("prolongation needs adjacent levels")
    mat = prolongation_matrix(space.disc, space.kind, space.level)
    return FieldFunction(space.disc.space(space.kind, fine_level), mat @ coarse.coefficients)


def restrict(fine: FieldFunction, coarse_level: int | None = None) -> FieldFunction:
    space = fine.space
    if coarse_level is None:
        coarse_level = space.level - 1
    if coarse_level != space.level - 1 or coarse_level < 0:
        raise ContractViolation("restriction needs adjacent levels")
    mat = restriction_matrix(space.disc, space.kind, coarse_level)
    return FieldFunction(space.disc.space(space.kind, coarse_level), mat @ fine.coefficients)


def inject(fine: FieldFunction, coarse_level: int) -> FieldFunction:
    """Nodal injection to any coarser level (coarse nodes are a prefix of fine nodes)."""
    space = fine.space
    if coarse_level > space.level:
        raise ContractViolation("injection goes to a coarser level")
    target = space.disc.space(space.kind, coarse_level)
    return FieldFunction(target, fine.coefficients[:target.dim].copy())
