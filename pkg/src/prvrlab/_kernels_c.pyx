# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels. Signatures and results mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt
from libc.stdlib cimport qsort, malloc, free

cnp.import_array()

ctypedef struct Scored:
    double score
    Py_ssize_t idx


cdef int _cmp_desc(const void* pa, const void* pb) noexcept nogil:
    cdef Scored* a = <Scored*> pa
    cdef Scored* b = <Scored*> pb
    if a.score > b.score:
        return -1
    if a.score < b.score:
        return 1
    if a.idx < b.idx:
        return -1
    if a.idx > b.idx:
        return 1
    return 0


cdef inline double _cos(double[:, ::1] t, Py_ssize_t i, Py_ssize_t j) noexcept nogil:
    cdef Py_ssize_t k, d = t.shape[1]
    cdef double dot = 0.0, na = 0.0, nb = 0.0
    for k in range(d):
        dot += t[i, k] * t[j, k]
        na += t[i, k] * t[i, k]
        nb += t[j, k] * t[j, k]
    if na == 0.0 or nb == 0.0:
        return -2.0
    return dot / sqrt(na * nb)


def optome_merge(frames, levels):
    cdef double[:, ::1] tok = np.array(frames, dtype=np.float64, order="C", copy=True)
    cdef cnp.int64_t[::1] lv = np.ascontiguousarray(levels, dtype=np.int64)
    cdef Py_ssize_t n = tok.shape[0], d = tok.shape[1]
    cdef cnp.int64_t[::1] sizes = np.ones(n, dtype=np.int64)
    cdef cnp.int64_t[::1] starts = np.arange(n, dtype=np.int64)
    cdef Py_ssize_t it, p, i, k, w, m, npairs
    cdef double sa, sb
    cdef Scored* buf = <Scored*> malloc(max(n // 2, 1) * sizeof(Scored))
    cdef char* merge = <char*> malloc(max(n // 2, 1))
    if buf == NULL or merge == NULL:
        free(buf)
        free(merge)
        raise MemoryError()
    try:
        for it in range(1, lv.shape[0]):
            m = n - lv[it]
            npairs = n // 2
            if m > npairs:
                raise ValueError(f"cannot remove {m} tokens from {n} with adjacent pairs")
            with nogil:
                for p in range(npairs):
                    buf[p].score = _cos(tok, 2 * p, 2 * p + 1)
                    buf[p].idx = p
                    merge[p] = 0
                qsort(buf, npairs, sizeof(Scored), _cmp_desc)
                for p in range(m):
                    merge[buf[p].idx] = 1
                w = 0
                i = 0
                while i < n:
                    if i + 1 < n and i % 2 == 0 and merge[i // 2]:
                        sa = sizes[i]
                        sb = sizes[i + 1]
                        for k in range(d):
                            tok[w, k] = (sa * tok[i, k] + sb * tok[i + 1, k]) / (sa + sb)
                        sizes[w] = sizes[i] + sizes[i + 1]
                        starts[w] = starts[i]
                        i += 2
                    else:
                        if w != i:
                            for k in range(d):
                                tok[w, k] = tok[i, k]
                            sizes[w] = sizes[i]
                            starts[w] = starts[i]
                        i += 1
                    w += 1
                n = w
    finally:
        free(buf)
        free(merge)
    return (np.asarray(tok)[:n].copy(), np.asarray(sizes)[:n].copy(), np.asarray(starts)[:n].copy())


def pair_match(tokens):
    cdef double[:, ::1] t = np.ascontiguousarray(tokens, dtype=np.float64)
    cdef Py_ssize_t n = t.shape[0]
    cdef Py_ssize_t na = (n + 1) // 2, nb = n // 2
    dst_arr = np.zeros(na, dtype=np.int64)
    sim_arr = np.full(na, -2.0)
    cdef cnp.int64_t[::1] dst = dst_arr
    cdef double[::1] sim = sim_arr
    cdef Py_ssize_t a, b
    cdef double s
    with nogil:
        for a in range(na):
            for b in range(nb):
                s = _cos(t, 2 * a, 2 * b + 1)
                if b == 0 or s > sim[a]:
                    sim[a] = s
                    dst[a] = b
    return dst_arr, sim_arr


def segment_max(queries, tokens, offsets):
    # dot products go through BLAS; the segmented max runs without the GIL
    cdef float[:, ::1] s = np.ascontiguousarray(
        np.asarray(queries, dtype=np.float32) @ np.asarray(tokens, dtype=np.float32).T)
    cdef cnp.int64_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t nq = s.shape[0], nv = off.shape[0] - 1
    out_arr = np.empty((nq, nv), dtype=np.float32)
    cdef float[:, ::1] out = out_arr
    cdef Py_ssize_t i, v, j
    cdef float best
    with nogil:
        for i in range(nq):
            for v in range(nv):
                best = -3.4e38
                for j in range(off[v], off[v + 1]):
                    if s[i, j] > best:
                        best = s[i, j]
                out[i, v] = best
    return out_arr


def count_above(sim, double tau):
    cdef double[:, ::1] s = np.ascontiguousarray(sim, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0], i, j
    cdef long c = 0
    with nogil:
        for i in range(n):
            for j in range(i + 1, n):
                if s[i, j] > tau:
                    c += 1
    return int(c)
