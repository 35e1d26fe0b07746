"""Reference kernels in plain Python/numpy.

Used when the compiled extension is unavailable or ``TPKD_PURE_PYTHON=1``.
"""
from __future__ import annotations

import numpy as np


def sublevel_pairs(values):
    """0-dim sublevel persistence of a 1-D sequence (elder rule, union-find).

    Returns ``(births, deaths, essential_birth)`` with births/deaths as float64
    arrays in the order the deaths occur.
    """
    x = np.asarray(values, dtype=np.float64)
    n = x.shape[0]
    # contract plateaus: keep the first index of every run of equal values
    keep = [0]
    for i in range(1, n):
        if x[i] != x[i - 1]:
            keep.append(i)
    v = x[keep]
    m = len(keep)
    order = sorted(range(m), key=lambda i: (v[i], i))

    parent = [-1] * m
    # per root: index (in contracted sequence) of the vertex that gave birth
    birth_at = [0] * m

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    births, deaths = [], []
    for i in order:
        parent[i] = i
        birth_at[i] = i
        for j in (i - 1, i + 1):
            if j < 0 or j >= m or parent[j] < 0:
                continue
            ri, rj = find(i), find(j)
            if ri == rj:
                continue
            bi, bj = birth_at[ri], birth_at[rj]
            # older = lower birth value, ties -> lower index
            if (v[bi], bi) <= (v[bj], bj):
                old, young = ri, rj
            else:
                old, young = rj, ri
            yb = v[birth_at[young]]
            if v[i] > yb:
                births.append(yb)
                deaths.append(v[i])
            parent[young] = old
    essential = float(v[order[0]])
    return (np.asarray(births, dtype=np.float64),
            np.asarray(deaths, dtype=np.float64), essential)


def rasterize(births, pers, weights, sigma, birth_centers, pers_centers):
    """Sum of weighted isotropic Gaussians sampled at cell centers.

    Output is indexed ``[persistence_row, birth_col]``.
    """
    b = np.asarray(births, dtype=np.float64)
    p = np.asarray(pers, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    bc = np.asarray(birth_centers, dtype=np.float64)
    pc = np.asarray(pers_centers, dtype=np.float64)
    out = np.zeros((pc.shape[0], bc.shape[0]), dtype=np.float64)
    norm = 1.0 / (2.0 * np.pi * sigma * sigma)
    inv = 1.0 / (2.0 * sigma * sigma)
    for t in range(b.shape[0]):
        gb = np.exp(-(bc - b[t]) ** 2 * inv)
        gp = (w[t] * norm) * np.exp(-(pc - p[t]) ** 2 * inv)
        out += np.outer(gp, gb)
    return out
