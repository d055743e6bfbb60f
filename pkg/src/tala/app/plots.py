"""Figures written next to the CSV output (matplotlib, non-interactive backend)."""
from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    _pyplot().close(fig)
    return path


def plot_convergence(result, path) -> Path:
    """Error against step size per (k, level), plus the fitted constants against k."""
    from tala.app.manufactured import T_END, T_START
    plt = _pyplot()
    fig, (ax, ax_c) = plt.subplots(1, 2, figsize=(10, 4))
    keys = sorted({(r.k, r.level) for r in result.runs})
    for k, level in keys:
        runs = sorted((r for r in result.runs if r.k == k and r.level == level), key=lambda r: r.n_steps)
        tau = np.array([(T_END - T_START) / r.n_steps for r in runs])
        err = np.array([r.error if math.isfinite(r.error) else np.nan for r in runs])
        slope = result.slopes.get((k, level), math.nan)
        ax.loglog(tau, err, "o-", label=f"k={k:g}, level {level}, slope {slope:.2f}")
        diverged = [t for t, r in zip(tau, runs) if r.status == "diverged"]
        if diverged:
            ax.plot(diverged, [np.nanmax(err) if np.any(np.isfinite(err)) else 1.0] * len(diverged), "kx")
    if keys:
        tau = np.array([(T_END - T_START) / r.n_steps for r in result.runs])
        ref = np.sort(np.unique(tau))
        ax.loglog(ref, ref ** 2, "k--", lw=0.8, label="tau^2")
    ax.set_xlabel("tau")
    ax.set_ylabel("L2 error at final time")
    ax.legend(fontsize=7)
    ks = sorted({k for k, _ in result.constants})
    for level in sorted({lv for _, lv in result.constants}):
        ax_c.loglog(ks, [result.constants.get((k, level), np.nan) for k in ks], "s-", label=f"level {level}")
    ax_c.set_xlabel("k")
    ax_c.set_ylabel("error constant")
    ax_c.legend(fontsize=7)
    return _save(fig, path)


def plot_bench(records, path) -> Path:
    """Relative residual against iterations and wall time for every variant."""
    plt = _pyplot()
    fig, (ax_i, ax_t) = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for r in records:
        if not r.residuals:
            continue
        rel = np.asarray(r.residuals) / r.residuals[0]
        label = f"{r.uzawa}/{r.schur}"
        ax_i.semilogy(np.arange(len(rel)), rel, label=label)
        if len(r.times) == len(rel):
            ax_t.semilogy(r.times, rel, label=label)
    ax_i.set_xlabel("FGMRES iteration")
    ax_i.set_ylabel("relative residual")
    ax_t.set_xlabel("wall time [s]")
    ax_i.legend(fontsize=6)
    return _save(fig, path)


def plot_field(space, values, path, title: str = "", cmap: str = "coolwarm") -> Path:
    """Filled plot of a scalar P2 field on the vertex triangulation of the finer level."""
    import matplotlib.tri as mtri
    plt = _pyplot()
    x = space.nodes
    # split each quadratic triangle into four linear ones for display
    d = space.dofmap
    sub = np.concatenate([d[:, [0, 3, 5]], d[:, [3, 1, 4]], d[:, [5, 4, 2]], d[:, [3, 4, 5]]])
    tri = mtri.Triangulation(x[:, 0], x[:, 1], sub)
    fig, ax = plt.subplots(figsize=(5, 5))
    pc = ax.tripcolor(tri, np.asarray(values, dtype=float), shading="gouraud", cmap=cmap)
    fig.colorbar(pc, ax=ax, shrink=0.8)
    ax.set_aspect("equal")
    ax.set_axis_off()
    ax.set_title(title)
    return _save(fig, path)


def plot_timeseries(rows: list[dict], path) -> Path:
    plt = _pyplot()
    fig, (ax_v, ax_i) = plt.subplots(1, 2, figsize=(10, 4))
    t = [float(r["t"]) for r in rows]
    ax_v.plot(t, [float(r["vrms"]) for r in rows])
    ax_v.set_xlabel("t")
    ax_v.set_ylabel("rms velocity")
    ax_i.plot(t, [int(r["stokes_iterations"]) for r in rows], label="Stokes FGMRES")
    ax_i.plot(t, [int(r["energy_iterations"]) for r in rows], label="temperature FGMRES")
    ax_i.set_xlabel("t")
    ax_i.set_ylabel("iterations")
    ax_i.legend()
    return _save(fig, path)


__all__ = ["plot_bench", "plot_convergence", "plot_field", "plot_timeseries"]
