"""Quadrature and Lagrange bases on the reference triangle (0,0), (1,0), (0,1)."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi, roots_legendre


@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def size(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def triangle_rule(degree: int) -> QuadratureRule:
    """Collapsed (Duffy) Gauss-Jacobi x Gauss-Legendre rule exact to ``degree``.

    Uses ``n = ceil((degree + 1) / 2)`` points per direction; the weight
    ``1 - u`` of the collapsed coordinate is absorbed by Gauss-Jacobi(1, 0).
    """
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    n = max(1, (degree + 2) // 2)
    tj, wj = roots_jacobi(n, 1.0, 0.0)
    tl, wl = roots_legendre(n)
    u = 0.5 * (tj + 1.0)
    v = 0.5 * (tl + 1.0)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    points = np.column_stack([uu.ravel(), ((1.0 - uu) * vv).ravel()])
    weights = np.outer(wj / 4.0, wl / 2.0).ravel()
    return QuadratureRule(points=points, weights=weights, degree=degree)


def _barycentric(points):
    x, y = points[..., 0], points[..., 1]
    return np.stack([1.0 - x - y, x, y], axis=-1)


_BARY_GRAD = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
_P2_EDGES = ((0, 1), (1, 2), (2, 0))


def p1_values(points: np.ndarray) -> np.ndarray:
    return _barycentric(np.asarray(points, dtype=float))


def p1_gradients(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.broadcast_to(_BARY_GRAD, points.shape[:-1] + (3, 2)).copy()


def p2_values(points: np.ndarray) -> np.ndarray:
    lam = _barycentric(np.asarray(points, dtype=float))
    vert = lam * (2.0 * lam - 1.0)
    edge = np.stack([4.0 * lam[..., a] * lam[..., b] for a, b in _P2_EDGES], axis=-1)
    return np.concatenate([vert, edge], axis=-1)


def p2_gradients(points: np.ndarray) -> np.ndarray:
    lam = _barycentric(np.asarray(points, dtype=float))
    g = _BARY_GRAD
    vert = (4.0 * lam - 1.0)[..., :, None] * g
    edge = np.stack([4.0 * (lam[..., a, None] * g[b] + lam[..., b, None] * g[a])
                     for a, b in _P2_EDGES], axis=-2)
    return np.concatenate([vert, edge], axis=-2)


def basis_values(kind: str, points: np.ndarray) -> np.ndarray:
    return p1_values(points) if kind == "P1" else p2_values(points)


def basis_gradients(kind: str, points: np.ndarray) -> np.ndarray:
    return p1_gradients(points) if kind == "P1" else p2_gradients(points)
