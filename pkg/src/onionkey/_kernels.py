"""Path-sampling kernels.

Every path is derived from pre-drawn uniforms, so the numba and numpy backends
turn the same uniforms into the same relay ids bit for bit.  Set
``ONIONKEY_DISABLE_NUMBA=1`` to make numpy the default backend.

Sampling within a half is weighted and without replacement: the guard is a
plain inverse-CDF draw; the middle and the third hop re-scale their uniform onto
the remaining mass and step over the removed relays' slots in the cumulative
table.  Both backends use the same float operations in the same order.

Uniform layout per circuit: ``[c_guard, c_mid, c_rend, s_guard, s_mid, s_exit]``.
"""

from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

NUMBA_DISABLED = os.environ.get("ONIONKEY_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")
HAVE_NUMBA = numba is not None
DEFAULT_BACKEND = "numba" if HAVE_NUMBA and not NUMBA_DISABLED else "numpy"

HOPS = 6
CLIENT_GUARD = 0
SERVICE_GUARD = 3


class WeightTables(NamedTuple):
    w: np.ndarray
    cum: np.ndarray
    cum_prev: np.ndarray
    unit: bool  # every weight is exactly 1.0, so cum == 1..P


def weight_tables(weights) -> WeightTables:
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-d array")
    cum = np.cumsum(w)
    cum_prev = np.empty_like(cum)
    cum_prev[0] = 0.0
    cum_prev[1:] = cum[:-1]
    return WeightTables(w, cum, cum_prev, bool(np.all(w == 1.0)))


def _jit(fn):
    if not HAVE_NUMBA:
        return fn
    return numba.njit(inline="always", cache=True, nogil=True)(fn)


# -- scalar kernels (numba) -------------------------------------------------

@_jit
def _search(cum, t, unit):
    # np.searchsorted(cum, t, side="right")
    p = cum.shape[0]
    if unit:
        i = int(t)
        return i if i < p else p
    return np.searchsorted(cum, t, side="right")


@_jit
def _clip(idx, p):
    return idx if idx < p - 1 else p - 1


@_jit
def _skip(idx, a, b, p):
    # rounding can land on a removed slot; step to the next live one
    while idx == a or idx == b:
        idx += 1
    if idx >= p:
        idx = p - 1
        while idx == a or idx == b:
            idx -= 1
    return idx


@_jit
def _draw(cum, u, unit):
    p = cum.shape[0]
    return _clip(_search(cum, u * cum[p - 1], unit), p)


@_jit
def _draw_excl1(cum, cum_prev, w, u, a, unit):
    p = cum.shape[0]
    t = u * (cum[p - 1] - w[a])
    t = t + w[a] * (t >= cum_prev[a])
    return _skip(_clip(_search(cum, t, unit), p), a, a, p)


@_jit
def _draw_excl2(cum, cum_prev, w, u, a, b, unit):
    p = cum.shape[0]
    lo = a if a < b else b
    hi = b if a < b else a
    t = u * ((cum[p - 1] - w[a]) - w[b])
    t = t + w[lo] * (t >= cum_prev[lo])
    t = t + w[hi] * (t >= cum_prev[hi])
    return _skip(_clip(_search(cum, t, unit), p), a, b, p)


@_jit
def _sample_half(cum, cum_prev, w, u0, u1, u2, fixed_guard, unit):
    g = fixed_guard if fixed_guard >= 0 else _draw(cum, u0, unit)
    m = _draw_excl1(cum, cum_prev, w, u1, g, unit)
    r = _draw_excl2(cum, cum_prev, w, u2, g, m, unit)
    return g, m, r


def _paths_loop(cum, cum_prev, w, u, pins, pin_client, pin_service, unit, out):
    trials, n = u.shape[0], u.shape[1]
    for t in range(trials):
        cg = _draw(cum, pins[t, 0], unit) if pin_client else -1
        sg = _draw(cum, pins[t, 1], unit) if pin_service else -1
        for c in range(n):
            a, b, d = _sample_half(cum, cum_prev, w, u[t, c, 0], u[t, c, 1], u[t, c, 2], cg, unit)
            out[t, c, 0] = a
            out[t, c, 1] = b
            out[t, c, 2] = d
            a, b, d = _sample_half(cum, cum_prev, w, u[t, c, 3], u[t, c, 4], u[t, c, 5], sg, unit)
            out[t, c, 3] = a
            out[t, c, 4] = b
            out[t, c, 5] = d


def _flags_loop(cum, cum_prev, w, compromised, u, pins, pin_client, pin_service, unit, out):
    trials, n = u.shape[0], u.shape[1]
    for t in range(trials):
        cg = _draw(cum, pins[t, 0], unit) if pin_client else -1
        sg = _draw(cum, pins[t, 1], unit) if pin_service else -1
        for c in range(n):
            a, b, d = _sample_half(cum, cum_prev, w, u[t, c, 0], u[t, c, 1], u[t, c, 2], cg, unit)
            out[t, c, 0] = compromised[a]
            out[t, c, 1] = compromised[b]
            out[t, c, 2] = compromised[d]
            a, b, d = _sample_half(cum, cum_prev, w, u[t, c, 3], u[t, c, 4], u[t, c, 5], sg, unit)
            out[t, c, 3] = compromised[a]
            out[t, c, 4] = compromised[b]
            out[t, c, 5] = compromised[d]


def _one_half(cum, cum_prev, w, u0, u1, u2, fixed_guard, unit):
    return _sample_half(cum, cum_prev, w, u0, u1, u2, fixed_guard, unit)


if HAVE_NUMBA:
    _paths_loop = numba.njit(cache=True, nogil=True)(_paths_loop)
    _flags_loop = numba.njit(cache=True, nogil=True)(_flags_loop)
    _one_half = numba.njit(cache=True)(_one_half)


# -- vectorised numpy path --------------------------------------------------

def _np_search(cum, t, unit):
    if unit:
        return np.minimum(t.astype(np.int64), cum.shape[0])
    return np.searchsorted(cum, t, side="right")


def _np_skip(idx, a, b, p):
    hit = (idx == a) | (idx == b)
    if not hit.any():
        return idx
    idx = idx.copy()
    while hit.any():
        idx[hit] += 1
        hit = (idx == a) | (idx == b)
    over = idx >= p
    idx[over] = p - 1
    hit = over & ((idx == a) | (idx == b))
    while hit.any():
        idx[hit] -= 1
        hit = over & ((idx == a) | (idx == b))
    return idx


def _np_draw(cum, u, unit):
    p = cum.shape[0]
    return np.minimum(_np_search(cum, u * cum[p - 1], unit), p - 1)


def _np_sample_half(tables: WeightTables, u0, u1, u2, fixed_guard):
    w, cum, cum_prev, unit = tables
    p = cum.shape[0]
    total = cum[p - 1]
    g = fixed_guard if fixed_guard is not None else _np_draw(cum, u0, unit)
    t = u1 * (total - w[g])
    t = t + w[g] * (t >= cum_prev[g])
    m = _np_skip(np.minimum(_np_search(cum, t, unit), p - 1), g, g, p)
    lo = np.minimum(g, m)
    hi = np.maximum(g, m)
    t = u2 * ((total - w[g]) - w[m])
    t = t + w[lo] * (t >= cum_prev[lo])
    t = t + w[hi] * (t >= cum_prev[hi])
    r = _np_skip(np.minimum(_np_search(cum, t, unit), p - 1), g, m, p)
    return g, m, r


def _paths_numpy(tables: WeightTables, u, pins, pin_client, pin_service):
    trials, n = u.shape[0], u.shape[1]
    cum, unit = tables.cum, tables.unit
    cg = np.repeat(_np_draw(cum, pins[:, 0], unit), n) if pin_client else None
    sg = np.repeat(_np_draw(cum, pins[:, 1], unit), n) if pin_service else None
    flat = u.reshape(trials * n, HOPS)
    out = np.empty((trials * n, HOPS), dtype=np.int64)
    out[:, 0], out[:, 1], out[:, 2] = _np_sample_half(tables, flat[:, 0], flat[:, 1], flat[:, 2], cg)
    out[:, 3], out[:, 4], out[:, 5] = _np_sample_half(tables, flat[:, 3], flat[:, 4], flat[:, 5], sg)
    return out.reshape(trials, n, HOPS)


# -- public entry points ----------------------------------------------------

def resolve_backend(backend: str | None) -> str:
    backend = backend or DEFAULT_BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    return backend


def _prep(tables, u, pins):
    if not isinstance(tables, WeightTables):
        tables = weight_tables(tables)
    u = np.ascontiguousarray(u, dtype=np.float64)
    pins = np.ascontiguousarray(pins, dtype=np.float64)
    if u.ndim != 3 or u.shape[2] != HOPS:
        raise ValueError("uniforms must have shape (trials, circuits, 6)")
    if pins.shape != (u.shape[0], 2):
        raise ValueError("pin uniforms must have shape (trials, 2)")
    if tables.cum.shape[0] < 3:
        raise ValueError("need at least 3 relays per half")
    return tables, u, pins


def sample_paths(weights, u, pins, pin_client=False, pin_service=False, backend=None) -> np.ndarray:
    """Relay ids, shape ``(trials, circuits, 6)``.

    ``weights`` may be a weight vector or a precomputed :class:`WeightTables`.
    """
    tables, u, pins = _prep(weights, u, pins)
    if resolve_backend(backend) == "numba":
        out = np.empty(u.shape, dtype=np.int64)
        _paths_loop(tables.cum, tables.cum_prev, tables.w, u, pins,
                    bool(pin_client), bool(pin_service), tables.unit, out)
        return out
    return _paths_numpy(tables, u, pins, pin_client, pin_service)


def observe_flags(weights, compromised, u, pins, pin_client=False, pin_service=False, backend=None) -> np.ndarray:
    """Compromise flag of every hop, shape ``(trials, circuits, 6)``, dtype bool."""
    tables, u, pins = _prep(weights, u, pins)
    comp = np.ascontiguousarray(compromised, dtype=np.bool_)
    if comp.shape != tables.cum.shape:
        raise ValueError("compromised mask must have one entry per relay")
    if resolve_backend(backend) == "numba":
        out = np.empty(u.shape, dtype=np.bool_)
        _flags_loop(tables.cum, tables.cum_prev, tables.w, comp, u, pins,
                    bool(pin_client), bool(pin_service), tables.unit, out)
        return out
    return comp[_paths_numpy(tables, u, pins, pin_client, pin_service)]


def sample_half(tables: WeightTables, u0: float, u1: float, u2: float, fixed_guard: int = -1,
                backend=None) -> tuple[int, int, int]:
    """One three-hop half, for the event-level simulator."""
    if resolve_backend(backend) == "numba":
        g, m, r = _one_half(tables.cum, tables.cum_prev, tables.w, float(u0), float(u1), float(u2),
                            int(fixed_guard), tables.unit)
        return int(g), int(m), int(r)
    fixed = None if fixed_guard < 0 else np.array([fixed_guard], dtype=np.int64)
    g, m, r = _np_sample_half(tables, np.array([u0]), np.array([u1]), np.array([u2]), fixed)
    return int(g[0]), int(m[0]), int(r[0])
