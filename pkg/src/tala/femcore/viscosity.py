"""Viscosity sampling for the operator hierarchy and the exp surrogate.

Two regimes, selected per level by the threshold ``l_eta``:

* levels ``<= l_eta`` evaluate the viscosity law at their own quadrature
  points, with the finest-level temperature located and evaluated there;
  the exponential may be replaced by a cheap piecewise polynomial;
* levels ``> l_eta`` use the P1 interpolant of nodal viscosities
  ``eta(x_V, T(x_V))``.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.polynomial import chebyshev as C

from tala.femcore.evaluation import evaluate_located, locate, quadrature_values
from tala.femcore.spaces import FieldFunction


class ExpSurrogate:
    """Piecewise polynomial approximation of ``exp`` on ``[lo, hi]``.

    The interval is cut into equal pieces and ``exp`` is interpolated at
    Chebyshev points of each piece.  The number of pieces is increased until
    the relative error on a fine check grid is below ``rtol``.  Arguments
    outside ``[lo, hi]`` fall back to ``np.exp``.
    """

    def __init__(self, lo: float, hi: float, degree: int = 6, rtol: float = 6e-4,
                 safety: float = 0.5, max_pieces: int = 4096):
        if not hi > lo:
            raise ValueError("need hi > lo")
        self.lo, self.hi, self.degree, self.rtol = float(lo), float(hi), int(degree), float(rtol)
        pieces = 1
        while True:
            self._build(pieces)
            if self.max_relative_error(4001) <= safety * rtol or pieces >= max_pieces:
                break
            pieces *= 2
        self.pieces = pieces

    def _build(self, pieces):
        self.width = (self.hi - self.lo) / pieces
        coeffs = []
        for k in range(pieces):
            a = self.lo + k * self.width
            cheb = C.Chebyshev.interpolate(np.exp, self.degree, domain=[a, a + self.width])
            coeffs.append(C.cheb2poly(cheb.coef))
        # monomial coefficients in the local variable t in [-1, 1], highest first
        self._coeffs = np.array(coeffs)[:, ::-1].copy()
        self._n = pieces

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        k = np.clip(((x - self.lo) / self.width).astype(np.int64), 0, self._n - 1)
        t = 2.0 * (x - self.lo - k * self.width) / self.width - 1.0
        c = self._coeffs[k]
        out = c[..., 0]
        for j in range(1, self.degree + 1):
            out = out * t + c[..., j]
        outside = (x < self.lo) | (x > self.hi)
        if np.any(outside):
            out = np.where(outside, np.exp(np.where(outside, x, 0.0)), out)
        return out

    def max_relative_error(self, n: int = 1_000_001) -> float:
        x = np.linspace(self.lo, self.hi, n)
        return float(np.max(np.abs(self(x) / np.exp(x) - 1.0)))


# law(x, T, exp) -> viscosity; ``exp`` lets callers swap in the surrogate
ViscosityLaw = Callable[..., np.ndarray]


class ViscosityField:
    """Viscosity sampled per level from a law and a finest-level temperature.

    Parameters
    ----------
    law : callable
        ``law(x, T, exp=np.exp)`` with ``x`` of shape ``(..., 2)``.
    temperature : FieldFunction or None
        P2 temperature on the finest level (``None`` for T-independent laws).
    l_eta : int
        Levels ``<= l_eta`` use quadrature-point evaluation.
    surrogate : ExpSurrogate, optional
        Replaces ``exp`` on levels ``<= l_eta`` when given.
    """

    def __init__(self, law: ViscosityLaw, temperature: FieldFunction | None, l_eta: int,
                 surrogate: ExpSurrogate | None = None, disc=None):
        self.law = law
        self.temperature = temperature
        self.l_eta = int(l_eta)
        self.surrogate = surrogate
        self.disc = temperature.space.disc if temperature is not None else disc
        if self.disc is None:
            raise ValueError("need a discretisation")
        self._cache: dict[tuple[int, int], np.ndarray] = {}
        self._p1: dict[int, np.ndarray] = {}

    def _temperature_at(self, points):
        if self.temperature is None:
            return np.zeros(points.shape[:-1])
        field = self.temperature
        where = locate(self.disc, field.space.level, points.reshape(-1, 2))
        return evaluate_located(field, where).reshape(points.shape[:-1])

    def nodal_p1(self, level: int) -> np.ndarray:
        """Vertex values ``eta(x_V, T(x_V))`` of the P1 viscosity on ``level``."""
        if level not in self._p1:
            space = self.disc.space("P1", level)
            x = space.nodes
            if self.temperature is None:
                t = np.zeros(len(x))
            else:
                # vertices of any level are a prefix of the finest P2 nodes
                t = self.temperature.coefficients[:len(x)]
            self._p1[level] = np.asarray(self.law(x, t, exp=np.exp), dtype=float)
        return self._p1[level]

    def p1_field(self, level: int) -> FieldFunction:
        return FieldFunction(self.disc.space("P1", level), self.nodal_p1(level))

    def at_quadrature(self, level: int, degree: int = 6) -> np.ndarray:
        """``(nE, nq)`` viscosity at the quadrature points of ``level``."""
        key = (level, degree)
        if key not in self._cache:
            if level > self.l_eta:
                vals = quadrature_values(self.p1_field(level), degree)
            else:
                geo = self.disc.geometry(level, degree)
                t = self._temperature_at(geo.points)
                exp = self.surrogate if self.surrogate is not None else np.exp
                vals = np.asarray(self.law(geo.points, t, exp=exp), dtype=float)
            if np.any(~(vals > 0)):
                raise ValueError("viscosity must be positive")
            self._cache[key] = vals
        return self._cache[key]

    def scaled(self, power: float, level: int, degree: int = 6, boundary_factor: float | None = None):
        """``eta**power`` at quadrature points, optionally rescaled on the surface layer.

        ``boundary_factor`` multiplies the viscosity on elements touching the
        surface before the power is taken.
        """
        eta = self.at_quadrature(level, degree)
        if boundary_factor is not None and boundary_factor != 1.0:
            mask = self.disc.mesh[level].surface_elements
            eta = eta.copy()
            eta[mask] *= boundary_factor
        return eta ** power
