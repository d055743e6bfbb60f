"""Element-loop threading with a deterministic reduction.

Elements of one macro triangle are stored contiguously, so an element range
made of whole macros is a natural work unit.  Each worker scatters into a
private vector and the partial vectors are summed in chunk order, which
makes results bitwise reproducible for a fixed thread count.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_state = {"threads": 1, "pool": None}


def set_num_threads(n: int) -> None:
    n = int(n)
    if n < 1:
        raise ValueError("thread count must be >= 1")
    pool = _state["pool"]
    if pool is not None:
        pool.shutdown(wait=True)
    _state["threads"] = n
    _state["pool"] = ThreadPoolExecutor(max_workers=n) if n > 1 else None


def get_num_threads() -> int:
    return _state["threads"]


def available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


def macro_chunks(n_elements: int, per_macro: int, n_chunks: int) -> list[slice]:
    """Split ``range(n_elements)`` into at most ``n_chunks`` runs of whole macros."""
    n_macro = n_elements // per_macro
    n_chunks = max(1, min(n_chunks, n_macro))
    bounds = np.linspace(0, n_macro, n_chunks + 1).round().astype(int) * per_macro
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def element_reduce(kernel, n_elements: int, per_macro: int):
    """Run ``kernel(slice)`` over macro chunks and sum the partial results in order."""
    threads = _state["threads"]
    if threads == 1:
        return kernel(slice(0, n_elements))
    chunks = macro_chunks(n_elements, per_macro, threads)
    parts = list(_state["pool"].map(kernel, chunks))
    out = parts[0]
    for part in parts[1:]:
        out = out + part
    return out


def element_map(kernel, n_elements: int, per_macro: int, axis: int = 0):
    """Run ``kernel(slice)`` over macro chunks and concatenate along ``axis``."""
    threads = _state["threads"]
    if threads == 1:
        return kernel(slice(0, n_elements))
    chunks = macro_chunks(n_elements, per_macro, threads)
    return np.concatenate(list(_state["pool"].map(kernel, chunks)), axis=axis)
