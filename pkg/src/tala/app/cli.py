"""Command-line entry point ``tala``.

Exit codes: 0 success, 2 configuration error, 3 solver failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from tala.app.config import ConfigError, RunConfig, apply_cli_overrides
from tala.app.io import CheckpointError, read_csv

log = logging.getLogger("tala")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="configuration file (INI sections)")
    common.add_argument("--threads", type=int, metavar="N", help="worker threads for element loops")
    common.add_argument("--seed", type=int, metavar="S", help="random seed")
    common.add_argument("--output", metavar="DIR", help="output directory")
    common.add_argument("--checkpoint", metavar="PATH", help="checkpoint file to write (simulate)")
    common.add_argument("--resume", metavar="PATH", help="checkpoint to resume from (simulate)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--no-figures", action="store_true", help="skip matplotlib figures")
    common.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    common.add_argument("-v", "--verbose", action="count", default=0)
    parser = _Parser(prog="tala", description="Matrix-free mantle convection on a 2D annulus.")
    sub = parser.add_subparsers(dest="mode", required=True, parser_class=_Parser)
    sub.add_parser("convergence-test", parents=[common], help="temporal convergence with a manufactured solution")
    sub.add_parser("solver-bench", parents=[common], help="compare Stokes preconditioners on one solve")
    sub.add_parser("simulate", parents=[common], help="time-dependent convection run")
    return parser


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return apply_cli_overrides(cfg, args)


def _emit(rows, header, out=None):
    out = sys.stdout if out is None else out
    out.write(",".join(header) + "\n")
    for row in rows:
        out.write(",".join("" if v is None else (f"{v:.6e}" if isinstance(v, float) else str(v))
                           for v in row) + "\n")
    out.flush()


def cmd_convergence(cfg: RunConfig, output: Path) -> int:
    from tala.app.runs import run_convergence_test
    res = run_convergence_test(cfg, output)
    _emit([[r.k, r.level, r.n_steps, r.error, r.status] for r in res.runs],
          ["k", "level", "n_steps", "l2_error", "status"])
    _emit([[k, lv, s, res.constants[(k, lv)]] for (k, lv), s in res.slopes.items()],
          ["k", "level", "slope", "constant"])
    if cfg.run.figures:
        from tala.app.plots import plot_convergence
        plot_convergence(res, output / "convergence.png")
    return EXIT_OK


def cmd_bench(cfg: RunConfig, output: Path) -> int:
    from tala.app.runs import run_solver_bench
    records = run_solver_bench(cfg, output)
    _emit([[r.uzawa, r.schur, r.status, r.iterations, r.iterations_to(1e-3), r.iterations_to(1e-6),
            r.times[-1] if r.times else 0.0] for r in records],
          ["uzawa", "schur", "status", "iterations", "it_1e-3", "it_1e-6", "wall_time"])
    if cfg.run.figures:
        from tala.app.plots import plot_bench
        plot_bench(records, output / "solver_bench.png")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, output: Path, checkpoint, resume) -> int:
    from tala.app.runs import SolverFailure, run_simulation, snapshot_fields
    from tala.physics import derived_constant_report
    sys.stdout.write(derived_constant_report(cfg.reference_constants()) + "\n")
    last = {}

    def keep(sim, state):
        last["sim"], last["state"] = sim, state

    try:
        state = run_simulation(cfg, output, checkpoint=checkpoint, resume=resume, on_step=keep)
    except SolverFailure as exc:
        log.error("solver failure: %s", exc)
        return EXIT_SOLVER
    rows = read_csv(output / "timeseries.csv")
    _emit([[r["step"], float(r["t"]), float(r["vrms"]), r["stokes_iterations"]] for r in rows],
          ["step", "t", "vrms", "stokes_iterations"])
    if cfg.run.figures and rows:
        from tala.app.plots import plot_field, plot_timeseries
        plot_timeseries(rows, output / "timeseries.png")
        if "sim" in last:
            fields = snapshot_fields(last["sim"], state)
            plot_field(state.T.space, fields["T_d"], output / f"T_d_{state.step:05d}.png",
                       title=f"T_d, step {state.step}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        sys.stderr.write(f"tala: configuration error: {exc}\n")
        return EXIT_CONFIG
    if args.print_config:
        sys.stdout.write(cfg.dumps())
        return EXIT_OK
    if (args.checkpoint or args.resume) and cfg.run.mode != "simulate":
        sys.stderr.write("tala: configuration error: --checkpoint/--resume only apply to simulate\n")
        return EXIT_CONFIG
    from tala.femcore import set_num_threads
    set_num_threads(cfg.run.threads)
    output = Path(cfg.run.output)
    output.mkdir(parents=True, exist_ok=True)
    cfg.dump(output / "config.ini")
    from tala.krylov import ConvergenceError
    try:
        if cfg.run.mode == "convergence-test":
            return cmd_convergence(cfg, output)
        if cfg.run.mode == "solver-bench":
            return cmd_bench(cfg, output)
        return cmd_simulate(cfg, output, args.checkpoint, args.resume)
    except CheckpointError as exc:
        sys.stderr.write(f"tala: configuration error: {exc}\n")
        return EXIT_CONFIG
    except ConvergenceError as exc:
        sys.stderr.write(f"tala: solver failure: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
