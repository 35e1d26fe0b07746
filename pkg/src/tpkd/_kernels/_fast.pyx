# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels mirroring :mod:`tpkd._kernels._pure`."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, M_PI

cnp.import_array()


cdef inline Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t i) noexcept nogil:
    cdef Py_ssize_t root = i, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


cdef inline bint _older(double[::1] v, Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return v[a] < v[b] or (v[a] == v[b] and a <= b)


def sublevel_pairs(values):
    cdef double[::1] x = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], m = 0, i, j, t, ri, rj, old, young, side
    cdef double[::1] v = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t[::1] parent
    cdef Py_ssize_t[::1] birth_at
    cdef double[::1] births = np.empty(n, dtype=np.float64)
    cdef double[::1] deaths = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t npairs = 0
    cdef double yb

    with nogil:
        v[0] = x[0]
        m = 1
        for i in range(1, n):
            if x[i] != x[i - 1]:
                v[m] = x[i]
                m += 1
    vv = np.asarray(v[:m])
    cdef Py_ssize_t[::1] order = np.lexsort((np.arange(m), vv)).astype(np.intp)
    parent = np.full(m, -1, dtype=np.intp)
    birth_at = np.zeros(m, dtype=np.intp)

    with nogil:
        for t in range(m):
            i = order[t]
            parent[i] = i
            birth_at[i] = i
            for side in range(2):
                j = i - 1 + 2 * side
                if j < 0 or j >= m or parent[j] < 0:
                    continue
                ri = _find(parent, i)
                rj = _find(parent, j)
                if ri == rj:
                    continue
                if _older(v, birth_at[ri], birth_at[rj]):
                    old = ri
                    young = rj
                else:
                    old = rj
                    young = ri
                yb = v[birth_at[young]]
                if v[i] > yb:
                    births[npairs] = yb
                    deaths[npairs] = v[i]
                    npairs += 1
                parent[young] = old
    return (np.asarray(births[:npairs]).copy(), np.asarray(deaths[:npairs]).copy(),
            float(v[order[0]]))


def rasterize(births, pers, weights, double sigma, birth_centers, pers_centers):
    cdef double[::1] b = np.ascontiguousarray(births, dtype=np.float64)
    cdef double[::1] p = np.ascontiguousarray(pers, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[::1] bc = np.ascontiguousarray(birth_centers, dtype=np.float64)
    cdef double[::1] pc = np.ascontiguousarray(pers_centers, dtype=np.float64)
    cdef Py_ssize_t npts = b.shape[0], nb = bc.shape[0], npc = pc.shape[0]
    out_arr = np.zeros((npc, nb), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] gb = np.empty(nb, dtype=np.float64)
    cdef double norm = 1.0 / (2.0 * M_PI * sigma * sigma)
    cdef double inv = 1.0 / (2.0 * sigma * sigma)
    cdef double d, s
    cdef Py_ssize_t t, r, c
    with nogil:
        for t in range(npts):
            for c in range(nb):
                d = bc[c] - b[t]
                gb[c] = exp(-d * d * inv)
            for r in range(npc):
                d = pc[r] - p[t]
                s = w[t] * norm * exp(-d * d * inv)
                for c in range(nb):
                    out[r, c] += s * gb[c]
    return out_arr
