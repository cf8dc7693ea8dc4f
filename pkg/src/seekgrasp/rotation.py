"""Exact-at-right-angles nearest-neighbor map rotation.

A rotation by index i out of k is decomposed into i = 4q + j quarter turns plus
a sub-90-degree nearest-neighbor rotation, so trig only ever sees angles in
[0, 90). Quarter turns are np.rot90 and therefore exact; the nearest-neighbor
step rounds in doubled centered coordinates with geometric ties broken toward
the rotational tangent. That tie rule commutes with quarter turns bitwise,
which makes rotate_k(m, a+4) == np.rot90(rotate_k(m, a), -1) an exact identity
and gives the Q-map pipeline its testable 90-degree equivariance.

Convention: x = column, y = row (screen down). rotate_k(m, i) rotates content
so that a world direction theta maps to theta + i*2pi/k; index 4 of k=16 sends
a +x arrow to +y (down).
"""
from __future__ import annotations

import numpy as np

_MAP_CACHE: dict = {}


def quarter(m: np.ndarray, q: int) -> np.ndarray:
    """Rotate content by q*90 degrees (y-down sense); exact."""
    return np.rot90(m, -q)


def _nearest_parity(t, parity, tangent):
    # nearest integer of the given parity to t; geometric ties (exact
    # midpoints) resolved toward the rotational tangent so the choice
    # commutes with quarter turns
    s = t - parity
    lo = 2.0 * np.floor(s / 2.0)
    frac = s - lo
    o = np.where(frac < 1.0, lo, lo + 2.0)
    tie = frac == 1.0
    if np.any(tie):
        o = np.where(tie, s + np.where(tangent > 0.0, 1.0, -1.0), o)
    return o + parity


def _nn_maps(shape, j, k):
    """Source index maps (si, sj, inside) for the sub-90 rotation j*2pi/k."""
    key = (shape, j, k)
    cached = _MAP_CACHE.get(key)
    if cached is not None:
        return cached
    h, w = shape
    phi = 2.0 * np.pi * j / k
    a, b = np.cos(phi), np.sin(phi)
    jj, ii = np.meshgrid(np.arange(w), np.arange(h), indexing="xy")
    u = (2 * jj - (w - 1)).astype(float)  # doubled centered x
    v = (2 * ii - (h - 1)).astype(float)  # doubled centered y
    # inverse of a +phi content rotation in y-down coordinates
    tx = a * u + b * v
    ty = -(b * u) + a * v
    ox = _nearest_parity(tx, (w - 1) % 2, -ty)
    oy = _nearest_parity(ty, (h - 1) % 2, tx)
    sj = ((ox + (w - 1)) / 2.0).astype(np.intp)
    si = ((oy + (h - 1)) / 2.0).astype(np.intp)
    inside = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
    si = np.where(inside, si, 0)
    sj = np.where(inside, sj, 0)
    out = (si, sj, inside)
    _MAP_CACHE[key] = out
    return out


def rotate_k(m: np.ndarray, i: int, k: int) -> np.ndarray:
    """Rotate content by i*2pi/k about the grid center; zero fill outside."""
    if k % 4 != 0:
        raise ValueError("k must be a multiple of 4")
    i = i % k
    q, j = divmod(i, k // 4)
    if j == 0:
        out = m
    else:
        si, sj, inside = _nn_maps(m.shape, j, k)
        out = np.where(inside, m[si, sj], 0.0)
    return quarter(np.array(out, dtype=float, copy=True), q)


def source_maps(shape, i: int, k: int):
    """Index maps (si, sj, inside) such that rotate_k(m,i)[p] == m[si[p], sj[p]].

    Used to route gradients through the un-rotation step without a gather of
    the full map.
    """
    i = i % k
    q, j = divmod(i, k // 4)
    if j == 0:
        h, w = shape
        si, sj = np.meshgrid(np.arange(h, dtype=np.intp), np.arange(w, dtype=np.intp),
                             indexing="ij")
        inside = np.ones(shape, dtype=bool)
    else:
        si, sj, inside = _nn_maps(shape, j, k)
    # composing with the quarter turn permutes where each source lands
    return (np.rot90(si, -q).copy(), np.rot90(sj, -q).copy(), np.rot90(inside, -q).copy())
