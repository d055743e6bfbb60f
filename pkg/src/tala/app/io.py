"""Run output: VTK legacy ASCII snapshots, line-buffered CSV and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import zipfile
from pathlib import Path

import numpy as np

from tala.energy import TimeState
from tala.femcore import Discretisation, FieldFunction

CHECKPOINT_FORMAT = "tala-checkpoint"
CHECKPOINT_VERSION = 1
VTK_QUADRATIC_TRIANGLE = 22


class CheckpointError(RuntimeError):
    """Unreadable, incompatible or mismatching checkpoint."""


# -------------------------------------------------------------------- CSV

class CsvLog:
    """CSV writer that flushes every row, so partial runs stay readable."""

    def __init__(self, path, header: list[str], append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        exists = append and self.path.exists() and self.path.stat().st_size > 0
        self._fh = open(self.path, "a" if append else "w", newline="", buffering=1, encoding="utf-8")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self.header = list(header)
        if not exists:
            self.row(self.header)

    def row(self, values) -> None:
        self._writer.writerow([_fmt(v) for v in values])
        self._fh.flush()

    def write(self, **values) -> None:
        self.row([values.get(k, "") for k in self.header])

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# -------------------------------------------------------------------- VTK

def write_vtk(path, space, point_data: dict[str, np.ndarray], title: str = "tala") -> Path:
    """Write P2 point data on quadratic triangles (legacy ASCII unstructured grid).

    Scalars are ``(n_nodes,)`` arrays and vectors ``(n_nodes, 2)`` arrays on
    the P2 nodes of ``space``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pts = space.nodes
    cells = space.dofmap
    n, ne = len(pts), len(cells)
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {n} double"]
    lines += [f"{float(x)!r} {float(y)!r} 0.0" for x, y in pts]
    lines.append(f"CELLS {ne} {ne * 7}")
    lines += ["6 " + " ".join(map(str, c)) for c in cells]
    lines.append(f"CELL_TYPES {ne}")
    lines += [str(VTK_QUADRATIC_TRIANGLE)] * ne
    lines.append(f"POINT_DATA {n}")
    for name, values in point_data.items():
        values = np.asarray(values, dtype=float)
        if values.shape == (n,):
            lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
            lines += [repr(float(v)) for v in values]
        elif values.shape == (n, 2):
            lines.append(f"VECTORS {name} double")
            lines += [f"{float(a)!r} {float(b)!r} 0.0" for a, b in values]
        else:
            raise ValueError(f"point data {name} has shape {values.shape}, expected ({n},) or ({n}, 2)")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")
    return path


def read_vtk_point_data(path) -> dict[str, np.ndarray]:
    """Read back the point data blocks written by :func:`write_vtk`."""
    tokens = Path(path).read_text(encoding="ascii").split("\n")
    out = {}
    i = next(k for k, line in enumerate(tokens) if line.startswith("POINT_DATA"))
    n = int(tokens[i].split()[1])
    i += 1
    while i < len(tokens) and tokens[i]:
        head = tokens[i].split()
        if head[0] == "SCALARS":
            out[head[1]] = np.array([float(v) for v in tokens[i + 2:i + 2 + n]])
            i += 2 + n
        elif head[0] == "VECTORS":
            rows = [line.split()[:2] for line in tokens[i + 1:i + 1 + n]]
            out[head[1]] = np.array(rows, dtype=float)
            i += 1 + n
        else:
            raise ValueError(f"unexpected VTK line {tokens[i]!r}")
    return out


def p1_to_p2(space_p2, p1_values: np.ndarray) -> np.ndarray:
    """Linear P1 values at all P2 nodes (edge midpoints averaged)."""
    lev = space_p2.mesh_level
    mid = 0.5 * (p1_values[lev.edges[:, 0]] + p1_values[lev.edges[:, 1]])
    return np.concatenate([p1_values, mid])


# ------------------------------------------------------------- checkpoint

def mesh_hash(disc: Discretisation, level: int) -> str:
    """Fingerprint of the refined mesh a state lives on."""
    lev = disc.mesh[level]
    h = hashlib.sha256()
    h.update(f"{disc.mesh.macro.descriptor()}|level={level}|blend={disc.blending.enabled}".encode())
    h.update(np.ascontiguousarray(lev.vertices).tobytes())
    h.update(np.ascontiguousarray(lev.triangles).astype(np.int64).tobytes())
    return h.hexdigest()


def save_checkpoint(path, state: TimeState, disc: Discretisation, config_text: str = "",
                    extra: dict | None = None) -> Path:
    """Write ``state`` atomically (temporary file, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    level = state.T.space.level
    meta = {
        "format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "mesh_hash": mesh_hash(disc, level),
        "level": level, "step": state.step, "t": state.t, "tau": state.tau,
        "has": {k: getattr(state, k) is not None for k in ("T_old", "u_old", "p")},
        "config": config_text, "extra": extra or {},
    }
    arrays = {k: getattr(state, k).coefficients.astype("<f8") for k in ("T", "T_old", "u", "u_old", "p")
              if getattr(state, k) is not None}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)
    os.replace(tmp, path)
    return path


def read_checkpoint_meta(path) -> tuple[dict, dict]:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            arrays = {k: data[k].copy() for k in data.files if k != "meta"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a tala checkpoint")
    if meta.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {meta.get('version')} is not supported "
            f"(this build reads version {CHECKPOINT_VERSION})")
    return meta, arrays


def load_checkpoint(path, disc: Discretisation) -> tuple[TimeState, dict]:
    """Restore a :class:`TimeState` onto ``disc``; the mesh fingerprint must match."""
    meta, arrays = read_checkpoint_meta(path)
    level = meta["level"]
    if level > disc.max_level or mesh_hash(disc, level) != meta["mesh_hash"]:
        raise CheckpointError(f"{path}: checkpoint was written for a different mesh")
    tsp, vsp, psp = disc.space("P2", level), disc.space("P2vec", level), disc.space("P1", level)

    def field(name, space):
        return FieldFunction(space, arrays[name]) if name in arrays else None

    state = TimeState(step=meta["step"], t=meta["t"], tau=meta["tau"], T=field("T", tsp),
                      T_old=field("T_old", tsp), u=field("u", vsp), u_old=field("u_old", vsp),
                      p=field("p", psp))
    return state, meta


__all__ = [
    "CHECKPOINT_VERSION", "CheckpointError", "CsvLog", "load_checkpoint", "mesh_hash", "p1_to_p2",
    "read_checkpoint_meta", "read_csv", "read_vtk_point_data", "save_checkpoint", "write_vtk",
]
