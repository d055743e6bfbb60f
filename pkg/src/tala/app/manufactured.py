"""Manufactured solution of the temporal convergence test.

The temperature, velocity and viscosity are prescribed in closed form; the
forcing is the residual of the model equation, derived symbolically once
and compiled to numpy.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import sympy as sp

R_CMB = 0.5
R_SURFACE = 1.5
T_START = 3.5
T_END = 4.5


@lru_cache(maxsize=None)
def _symbols():
    t, x0, x1, k = sp.symbols("t x0 x1 k", real=True)
    T = x0 * x1 * sp.cos(t * sp.sqrt((x0 + sp.sin(3 * t)) ** 2 + (x1 - sp.cos(3 * t)) ** 2))
    c = 2 + sp.cos(3 * sp.pi * t + x0 * x1 * t)
    u = (-c * x1, c * x0)
    eta = (x0 ** 2 + x1 ** 2) * sp.exp(-T)
    r = sp.sqrt(x0 ** 2 + x1 ** 2)
    g = (-x0 / r, -x1 / r)
    gx = (sp.diff(u[0], x0), sp.diff(u[0], x1), sp.diff(u[1], x0), sp.diff(u[1], x1))
    half = (gx[0] + gx[3]) / 2
    exy = (gx[1] + gx[2]) / 2
    eps2 = (gx[0] - half) ** 2 + (gx[3] - half) ** 2 + 2 * exy ** 2
    lap = sp.diff(T, x0, 2) + sp.diff(T, x1, 2)
    shear = 2 * eta * eps2
    f = (sp.diff(T, t) + u[0] * sp.diff(T, x0) + u[1] * sp.diff(T, x1) - k * lap
         - T * (u[0] * g[0] + u[1] * g[1]) - shear - 1)
    args = (t, x0, x1)
    return {
        "T": sp.lambdify(args, T, "numpy"),
        "u": sp.lambdify(args, u, "numpy"),
        "f": sp.lambdify((t, x0, x1, k), f, "numpy"),
        "shear": sp.lambdify(args, shear, "numpy"),
    }


@dataclass(frozen=True)
class ManufacturedSolution:
    """Closed-form fields; every callable takes points of shape ``(..., 2)``."""

    k: float
    shear_heating: bool = True

    def temperature(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(_symbols()["T"](t, x[..., 0], x[..., 1]), x.shape[:-1]).astype(float)

    def velocity(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a, b = _symbols()["u"](t, x[..., 0], x[..., 1])
        return np.stack(np.broadcast_arrays(a, b), axis=-1).astype(float)

    def forcing(self, t: float, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        f = _symbols()["f"](t, x[..., 0], x[..., 1], self.k)
        if not self.shear_heating:
            f = f + _symbols()["shear"](t, x[..., 0], x[..., 1])
        return np.broadcast_to(f, x.shape[:-1]).astype(float)

    def shear_heating_rate(self, t: float, x: np.ndarray) -> np.ndarray:
        """``2 η ε̇:ε̇`` of the exact fields."""
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(_symbols()["shear"](t, x[..., 0], x[..., 1]), x.shape[:-1]).astype(float)

    @staticmethod
    def viscosity(x, T, exp=np.exp):
        x = np.asarray(x, dtype=float)
        return (x[..., 0] ** 2 + x[..., 1] ** 2) * exp(-np.asarray(T))
