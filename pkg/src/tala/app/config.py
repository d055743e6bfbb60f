"""Run configuration: INI-style sections of ``key = value`` pairs.

Precedence, lowest first: built-in defaults, the config file, command-line
flags.  Every key of every section is written by :meth:`RunConfig.dumps`, so
a serialised file documents the complete run and parses back to the same
configuration.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import typing
from dataclasses import dataclass, field, fields

from tala.physics import DEFAULT_ETA_BASE_TABLE, ReferenceConstants, default_physical_params
from tala.stokes import SchurKind, SolverConfig, UzawaKind

MODES = ("convergence-test", "solver-bench", "simulate")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


@dataclass
class RunSection:
    mode: str = "simulate"
    seed: int = 0
    threads: int = 1
    output: str = "output"
    figures: bool = True
    output_every: int = 1          # steps between VTK snapshots
    checkpoint_every: int = 5      # steps between checkpoints
    wall_budget: float = 0.0       # seconds, 0 = unlimited


@dataclass
class MeshSection:
    n_tangential: int = 8
    n_radial: int = 2
    blending: bool = True


@dataclass
class PhysicsSection:
    # reference constants, SI units
    d: float = 2.891e6             # m
    delta_t: float = 3900.0        # K
    eta0: float = 1e22             # Pa s
    rho0: float = 4686.0           # kg/m^3
    cp0: float = 1250.0            # J/(kg K)
    alpha0: float = 2e-5           # 1/K
    g0: float = 9.81               # m/s^2
    u0: float = 5e-9               # m/s
    k0: float = 3.0                # W/(m K)
    gamma0: float = 1.2            # -
    r_surface: float = 6.371e6     # m
    r_cmb: float = 3.48e6          # m
    t_surface: float = 300.0       # K
    t_cmb: float = 4200.0          # K
    rho_top: float = 3381.0        # kg/m^3
    t_adiabatic: float = 1600.0    # K
    # model switches (nondimensional)
    rayleigh: float | None = None  # none = derived from the constants
    internal_heating: float = 0.0
    compressible: bool = True
    shear_heating: bool = True
    adiabatic_heating: bool = True
    # illustrative eta_base table: "depth:value" pairs, depth nondimensional
    eta_base: str = ", ".join(f"{d:g}:{v:g}" for d, v in DEFAULT_ETA_BASE_TABLE)


@dataclass
class TimeSection:
    c_cfl: float = 1.0
    tau_max: float = 1e-3
    tau_first: float | None = None   # none = CFL/tau_max rule
    window_lo: float = 0.5
    window_hi: float = 1.5
    t_end: float = 1.0
    max_steps: int = 100
    noise: float = 0.03
    mmoc_substeps: int | None = None  # none = from the CFL number of the step
    lhs_advection: bool = True


@dataclass
class ConvergenceSection:
    k_values: str = "0.1"
    levels: str = "5"
    n_steps: str = "8, 16, 32, 64"
    lhs_advection: bool = False
    wall_budget: float = 1800.0


@dataclass
class BenchSection:
    level: int = 4
    atol: float = 1e-8
    max_iterations: int = 150
    uzawa: str = "inexact, adjoint, symmetric"
    schur: str = "mass, wbfbt, wbfbt-asym, vbfbt"
    asym_a_r: float = 10.0
    asym_a_l: float = 1.0
    wall_budget: float = 1800.0


SECTIONS = {
    "run": RunSection, "mesh": MeshSection, "solver": SolverConfig, "physics": PhysicsSection,
    "time": TimeSection, "convergence": ConvergenceSection, "bench": BenchSection,
}


UNITS = {
    "physics.d": "m", "physics.delta_t": "K", "physics.eta0": "Pa s", "physics.rho0": "kg/m^3",
    "physics.cp0": "J/(kg K)", "physics.alpha0": "1/K", "physics.g0": "m/s^2", "physics.u0": "m/s",
    "physics.k0": "W/(m K)", "physics.gamma0": "-", "physics.r_surface": "m", "physics.r_cmb": "m",
    "physics.t_surface": "K", "physics.t_cmb": "K", "physics.rho_top": "kg/m^3", "physics.t_adiabatic": "K",
    "physics.rayleigh": "nondimensional, none = derived", "physics.internal_heating": "nondimensional",
    "physics.eta_base": "depth:eta pairs, nondimensional, illustrative",
    "solver.omega_wbfbt": "none = omega; 0.0125 is the alternative reported for w-BFBT",
    "time.c_cfl": "-", "time.tau_max": "nondimensional time", "time.t_end": "nondimensional time",
    "time.tau_first": "nondimensional time, none = tau_max", "run.wall_budget": "s, 0 = unlimited",
    "convergence.wall_budget": "s", "bench.wall_budget": "s", "bench.atol": "absolute residual",
}


def _hints(cls):
    return typing.get_type_hints(cls)


def _parse_value(text: str, hint, key: str):
    text = text.strip()
    optional = type(None) in typing.get_args(hint)
    if optional:
        if text.lower() in ("none", ""):
            return None
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    try:
        if hint is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {getattr(hint, '__name__', hint)}") from None


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_list(text: str, kind=float) -> list:
    return [kind(part) for part in text.replace(";", ",").split(",") if part.strip()]


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    mesh: MeshSection = field(default_factory=MeshSection)
    solver: SolverConfig = field(default_factory=SolverConfig)
    physics: PhysicsSection = field(default_factory=PhysicsSection)
    time: TimeSection = field(default_factory=TimeSection)
    convergence: ConvergenceSection = field(default_factory=ConvergenceSection)
    bench: BenchSection = field(default_factory=BenchSection)

    # ------------------------------------------------------------ parsing
    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        values = {}
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"unknown section [{name}]")
            values[name] = dict(parser.items(name))
        return cls.from_mapping(values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                return cls.loads(fh.read())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        cfg = cls()
        return cfg.updated(values)

    def updated(self, values: dict) -> "RunConfig":
        """Copy with ``{section: {key: text-or-value}}`` overrides applied."""
        parts = {}
        for name, section_cls in SECTIONS.items():
            current = getattr(self, name)
            changes = dict(values.get(name, {}))
            hints = _hints(section_cls)
            known = {f.name for f in fields(section_cls)}
            parsed = {}
            for key, raw in changes.items():
                if key not in known:
                    raise ConfigError(f"unknown key {name}.{key}")
                parsed[key] = _parse_value(raw, hints[key], f"{name}.{key}") if isinstance(raw, str) \
                    and hints[key] is not str else raw
            try:
                parts[name] = dataclasses.replace(current, **parsed)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        cfg = RunConfig(**parts)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.run.mode not in MODES:
            raise ConfigError(f"run.mode must be one of {', '.join(MODES)}")
        if self.run.threads < 1:
            raise ConfigError("run.threads must be >= 1")
        if self.mesh.n_tangential < 3 or self.mesh.n_radial < 1:
            raise ConfigError("mesh needs n_tangential >= 3 and n_radial >= 1")
        s = self.solver
        if not s.l_min <= s.l_eta <= s.l_max:
            raise ConfigError("need l_min <= l_eta <= l_max")
        if self.time.c_cfl <= 0 or self.time.tau_max <= 0:
            raise ConfigError("time.c_cfl and time.tau_max must be positive")
        if not 0 < self.time.window_lo <= 1 <= self.time.window_hi:
            raise ConfigError("need 0 < window_lo <= 1 <= window_hi")
        try:
            self.eta_table()
            parse_list(self.convergence.k_values)
            parse_list(self.convergence.levels, int)
            parse_list(self.convergence.n_steps, int)
            for kind in parse_list(self.bench.uzawa, str):
                UzawaKind(kind.strip())
            for kind in parse_list(self.bench.schur, str):
                kind = kind.strip()
                if kind != "wbfbt-asym":
                    SchurKind(kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    # ------------------------------------------------------- serialising
    def dumps(self) -> str:
        buf = io.StringIO()
        buf.write("# tala run configuration\n")
        for name in SECTIONS:
            section = getattr(self, name)
            buf.write(f"\n[{name}]\n")
            for f in fields(section):
                line = f"{f.name} = {_format_value(getattr(section, f.name))}"
                note = UNITS.get(f"{name}.{f.name}")
                buf.write(f"{line:40s} # {note}\n" if note else line + "\n")
        return buf.getvalue()

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    # ---------------------------------------------------------- builders
    def eta_table(self) -> tuple[tuple[float, float], ...]:
        pairs = []
        for item in parse_list(self.physics.eta_base, str):
            depth, _, value = item.partition(":")
            pairs.append((float(depth), float(value)))
        if not pairs or any(v <= 0 for _, v in pairs):
            raise ValueError("physics.eta_base needs positive 'depth:value' pairs")
        return tuple(pairs)

    def reference_constants(self) -> ReferenceConstants:
        names = {f.name for f in fields(ReferenceConstants)}
        try:
            return ReferenceConstants(**{n: getattr(self.physics, n) for n in names})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def physical_params(self):
        ph = self.physics
        return default_physical_params(
            self.reference_constants(), eta_table=self.eta_table(), rayleigh=ph.rayleigh,
            internal_heating=ph.internal_heating, compressible=ph.compressible,
            shear_heating=ph.shear_heating, adiabatic_heating=ph.adiabatic_heating)


def apply_cli_overrides(cfg: RunConfig, args) -> RunConfig:
    """Fold the generic command-line flags into the configuration."""
    run = {"mode": args.mode}
    for key in ("threads", "seed", "output"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = value
    if getattr(args, "no_figures", False):
        run["figures"] = False
    changes = {"run": run}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        changes.setdefault(section, {})[name] = value
    unknown = set(changes) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    return cfg.updated(changes)


__all__ = ["ConfigError", "MODES", "RunConfig", "apply_cli_overrides", "parse_list"]
