"""Material laws and nondimensionalisation of the compressible mantle model.

Everything downstream works in nondimensional variables; dimensional values
appear only in :class:`ReferenceConstants` and the derived-constant report.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

log = logging.getLogger(__name__)

SECONDS_PER_MYR = 1e6 * 365.25 * 24 * 3600

E_ACTIVATION = 4.610
V_ACTIVATION = 2.996


@dataclass(frozen=True)
class ReferenceConstants:
    """Independent reference constants in SI units."""

    d: float = 2.891e6            # mantle depth [m]
    delta_t: float = 3900.0       # temperature scale [K]
    eta0: float = 1e22            # viscosity [Pa s]
    rho0: float = 4686.0          # density [kg/m^3]
    cp0: float = 1250.0           # heat capacity [J/(kg K)]
    alpha0: float = 2e-5          # thermal expansivity [1/K]
    g0: float = 9.81              # gravity [m/s^2]
    u0: float = 5e-9              # velocity [m/s]
    k0: float = 3.0               # conductivity [W/(m K)]
    gamma0: float = 1.2           # Grueneisen parameter [-]
    r_surface: float = 6.371e6    # [m]
    r_cmb: float = 3.48e6         # [m]
    t_surface: float = 300.0      # [K]
    t_cmb: float = 4200.0         # [K]
    rho_top: float = 3381.0       # [kg/m^3]
    t_adiabatic: float = 1600.0   # [K]

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"reference constant {name} must be positive, got {value}")
        if self.r_cmb >= self.r_surface:
            raise ValueError("need r_cmb < r_surface")


@dataclass(frozen=True)
class DimensionlessNumbers:
    kappa: float      # thermal diffusivity [m^2/s]
    t0: float         # time scale [s]
    p0: float         # pressure scale [Pa]
    h0: float         # internal heating scale [W/kg]
    ql0: float        # latent heat scale
    kt0: float        # bulk modulus scale [Pa]
    kappat0: float    # compressibility scale [1/Pa]
    ra: float
    pe: float
    di: float
    gamma: float      # mantle compressibility Di / Gamma0
    xi: float         # driving term alpha0 * delta_T

    def table(self) -> list[tuple[str, float, str]]:
        return [
            ("kappa", self.kappa, "m^2/s"), ("t0", self.t0, "s"), ("p0", self.p0, "Pa"),
            ("H0", self.h0, "W/kg"), ("QL0", self.ql0, "W/m^3"), ("KT0", self.kt0, "Pa"),
            ("kappaT0", self.kappat0, "1/Pa"), ("Ra", self.ra, "-"), ("Pe", self.pe, "-"),
            ("Di", self.di, "-"), ("gamma", self.gamma, "-"), ("xi", self.xi, "-"),
        ]


def nondimensionalize(rc: ReferenceConstants) -> DimensionlessNumbers:
    kappa = rc.k0 / (rc.rho0 * rc.cp0)
    di = rc.alpha0 * rc.g0 * rc.d / rc.cp0
    kappat0 = rc.alpha0 / (rc.gamma0 * rc.rho0 * rc.cp0)
    return DimensionlessNumbers(
        kappa=kappa,
        t0=rc.d / rc.u0,
        p0=rc.eta0 * rc.u0 / rc.d,
        h0=rc.cp0 * rc.delta_t * rc.u0 / rc.d,
        ql0=rc.rho0 * rc.u0 * rc.delta_t * rc.cp0 / rc.d,
        kt0=1.0 / kappat0,
        kappat0=kappat0,
        ra=rc.rho0 * rc.alpha0 * rc.g0 * rc.delta_t * rc.d ** 3 / (kappa * rc.eta0),
        pe=rc.u0 * rc.d / kappa,
        di=di,
        gamma=di / rc.gamma0,
        xi=rc.alpha0 * rc.delta_t,
    )


def myr_to_nondimensional(myr: float, rc: ReferenceConstants = ReferenceConstants()) -> float:
    return myr * SECONDS_PER_MYR / (rc.d / rc.u0)


# Illustrative four-layer base viscosity (depth below the surface in
# nondimensional units, eta_base).  Not digitised from any figure.
DEFAULT_ETA_BASE_TABLE = (
    (0.0, 10.0),      # lithosphere
    (0.035, 10.0),
    (0.05, 0.1),      # asthenosphere
    (0.14, 0.1),
    (0.23, 1.0),      # transition zone
    (0.25, 30.0),     # lower mantle
    (1.0, 30.0),
)


class BaseViscosityProfile:
    """Piecewise log-linear ``eta_base`` over depth ``r_surface - r``.

    Values outside the table are clamped to the end knots.
    """

    def __init__(self, table=DEFAULT_ETA_BASE_TABLE, r_surface: float = 2.2037, r_cmb: float = 1.2037):
        depth, vals = zip(*sorted(table))
        self.depth = np.asarray(depth, dtype=float)
        vals = np.asarray(vals, dtype=float)
        if np.any(~(vals > 0)) or np.any(~np.isfinite(vals)):
            raise ValueError("base viscosity values must be positive and finite")
        self.log_values = np.log(vals)
        self.r_surface = r_surface
        self.r_cmb = r_cmb

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        tol = 1e-9 * (self.r_surface - self.r_cmb)
        if np.any((r < self.r_cmb - tol) | (r > self.r_surface + tol)):
            log.warning("base viscosity queried outside the shell; clamping")
        depth = self.r_surface - r
        if len(self.depth) == 1:
            return np.full(r.shape, math.exp(self.log_values[0]))
        return np.exp(np.interp(depth, self.depth, self.log_values))


@dataclass
class ViscosityModel:
    """Frank-Kamenetskii law ``eta_base(r) exp(-E_A T + V_A (r_s - |x|))``."""

    eta_base: BaseViscosityProfile
    r_surface: float = 2.2037
    e_a: float = E_ACTIVATION
    v_a: float = V_ACTIVATION

    def exponent(self, x, t):
        r = np.linalg.norm(x, axis=-1)
        return -self.e_a * np.asarray(t) + self.v_a * (self.r_surface - r)

    def __call__(self, x, t, exp=np.exp):
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        return self.eta_base(r) * exp(self.exponent(x, t))

    def exponent_range(self, t_min: float, t_max: float, r_cmb: float) -> tuple[float, float]:
        lo = -self.e_a * t_max
        hi = -self.e_a * t_min + self.v_a * (self.r_surface - r_cmb)
        return lo, hi


@dataclass
class DensityProfile:
    """``rho_top exp(gamma (r_s - |x|))`` and its closed-form log gradient."""

    rho_top: float
    gamma: float
    r_surface: float

    def __call__(self, x):
        r = _radius(x)
        return self.rho_top * np.exp(self.gamma * (self.r_surface - r))

    def grad_ln(self, x):
        x = np.asarray(x, dtype=float)
        r = _radius(x)
        return -self.gamma * x / r[..., None]


def _radius(x):
    r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    if np.any(r == 0.0):
        raise ValueError("radius must be nonzero")
    return r


def gravity(x):
    """Unit gravity pointing to the centre."""
    x = np.asarray(x, dtype=float)
    return -x / _radius(x)[..., None]


@dataclass
class PhysicalParams:
    """Nondimensional parameter set of one simulation."""

    ra: float
    pe: float
    di: float
    gamma: float
    xi: float
    r_cmb: float
    r_surface: float
    t_surface: float
    t_cmb: float
    t_adiabatic: float
    rho_top: float
    viscosity: ViscosityModel
    conductivity: float = 1.0
    heat_capacity: float = 1.0
    expansivity: float = 1.0
    internal_heating: float = 0.0
    compressible: bool = True
    shear_heating: bool = True
    adiabatic_heating: bool = True
    rho_scale: float = 1.0

    @property
    def density(self) -> DensityProfile:
        return DensityProfile(self.rho_top, self.gamma if self.compressible else 0.0, self.r_surface)

    def reference_temperature(self, x):
        r = _radius(x)
        return self.t_adiabatic * np.exp(self.di * (self.r_surface - r))

    def scaled(self, **changes) -> "PhysicalParams":
        return replace(self, **changes)


def default_physical_params(rc: ReferenceConstants = ReferenceConstants(),
                            eta_table=DEFAULT_ETA_BASE_TABLE, rayleigh: float | None = None,
                            **overrides) -> PhysicalParams:
    """Mantle setup with nondimensional radii ``r/d``."""
    nd = nondimensionalize(rc)
    r_s = rc.r_surface / rc.d
    r_c = rc.r_cmb / rc.d
    profile = BaseViscosityProfile(eta_table, r_surface=r_s, r_cmb=r_c)
    params = PhysicalParams(
        ra=nd.ra if rayleigh is None else rayleigh, pe=nd.pe, di=nd.di, gamma=nd.gamma, xi=nd.xi,
        r_cmb=r_c, r_surface=r_s,
        t_surface=rc.t_surface / rc.delta_t, t_cmb=rc.t_cmb / rc.delta_t,
        t_adiabatic=rc.t_adiabatic / rc.delta_t, rho_top=rc.rho_top / rc.rho0,
        viscosity=ViscosityModel(profile, r_surface=r_s),
    )
    return params.scaled(**overrides) if overrides else params


def viscosity(params: PhysicalParams, x, t):
    return params.viscosity(x, t)


def density(params: PhysicalParams, x):
    return params.density(x)


def grad_ln_density(params: PhysicalParams, x):
    return params.density.grad_ln(x)


def reference_temperature(params: PhysicalParams, x):
    return params.reference_temperature(x)


def base_viscosity_profile(profile: BaseViscosityProfile, r):
    return profile(r)


def derived_constant_report(rc: ReferenceConstants = ReferenceConstants()) -> str:
    nd = nondimensionalize(rc)
    lines = [f"{name:8s} = {value:.4e} {unit}" for name, value, unit in nd.table()]
    return "\n".join(lines)


__all__ = [
    "BaseViscosityProfile", "DEFAULT_ETA_BASE_TABLE", "DensityProfile", "DimensionlessNumbers",
    "E_ACTIVATION", "PhysicalParams", "ReferenceConstants", "V_ACTIVATION", "ViscosityModel",
    "base_viscosity_profile", "default_physical_params", "density", "derived_constant_report",
    "grad_ln_density", "gravity", "myr_to_nondimensional", "nondimensionalize",
    "reference_temperature", "viscosity",
]
