# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: simplex projections and set-partition search.

Every function here has a drop-in twin in ``_fallback`` with the same
signature and return convention.
"""
import numpy as np

from libc.math cimport fabs
from libc.stdlib cimport malloc, free


def dykstra_rows(double[:, ::1] a, double tol, long max_sweeps):
    """Project each row onto the probability simplex with Dykstra's method.

    The simplex is the intersection of the box [0, 1]^C and the hyperplane
    sum(v) = 1; both projections are alternated with correction terms.

    A row stops once the hyperplane iterate moves less than ``tol`` in a
    sweep and lies within ``tol`` of the box iterate; the iterate alone can
    stall for a sweep while the corrections are still moving.

    Returns ``(out, sweeps)`` where ``sweeps[i]`` is the number of sweeps row
    ``i`` needed, or -1 if it hit ``max_sweeps`` without converging.
    """
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    sweeps_arr = np.full(n, -1, dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef long long[::1] sweeps = sweeps_arr
    cdef double *x = <double *> malloc(m * sizeof(double))
    cdef double *y = <double *> malloc(m * sizeof(double))
    cdef double *p = <double *> malloc(m * sizeof(double))
    cdef double *q = <double *> malloc(m * sizeof(double))
    cdef Py_ssize_t i, j
    cdef long it
    cdef double s, shift, xn, change, v, gap
    try:
        for i in range(n):
            for j in range(m):
                x[j] = a[i, j]
                p[j] = 0.0
                q[j] = 0.0
            for it in range(max_sweeps):
                for j in range(m):
                    v = x[j] + p[j]
                    y[j] = 0.0 if v < 0.0 else (1.0 if v > 1.0 else v)
                    p[j] = v - y[j]
                s = 0.0
                for j in range(m):
                    s += y[j] + q[j]
                shift = (s - 1.0) / m
                change = 0.0
                gap = 0.0
                for j in range(m):
                    v = y[j] + q[j]
                    xn = v - shift
                    q[j] = v - xn
                    if fabs(xn - x[j]) > change:
                        change = fabs(xn - x[j])
                    if fabs(xn - y[j]) > gap:
                        gap = fabs(xn - y[j])
                    x[j] = xn
                if change < tol and gap < tol:
                    sweeps[i] = it + 1
                    break
            for j in range(m):
                v = x[j]
                out[i, j] = 0.0 if v < 0.0 else (1.0 if v > 1.0 else v)
    finally:
        free(x)
        free(y)
        free(p)
        free(q)
    return out_arr, sweeps_arr


def sort_rows(double[:, ::1] a):
    """Exact Euclidean projection of each row onto the simplex (sort-based)."""
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    srt = -np.sort(-np.asarray(a), axis=1)
    cdef double[:, ::1] u = np.ascontiguousarray(srt)
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double css, theta, t
    for i in range(n):
        css = 0.0
        theta = 0.0
        for j in range(m):
            css += u[i, j]
            t = (css - 1.0) / (j + 1)
            if u[i, j] - t > 0.0:
                theta = t
        for j in range(m):
            t = a[i, j] - theta
            out[i, j] = t if t > 0.0 else 0.0
    return out_arr


cdef struct _Search:
    int n
    double beta
    double *cost
    long long *masks
    int *labels
    int *best_labels
    double best
    long long count


cdef void _dfs(_Search *st, int i, int nblocks) noexcept nogil:
    cdef int b
    cdef double total
    if i == st.n:
        total = 0.0
        for b in range(nblocks):
            total += st.cost[st.masks[b]]
        total += st.beta * nblocks
        st.count += 1
        if total < st.best:
            st.best = total
            for b in range(st.n):
                st.best_labels[b] = st.labels[b]
        return
    for b in range(nblocks):
        st.masks[b] |= (<long long> 1) << i
        st.labels[i] = b
        _dfs(st, i + 1, nblocks)
        st.masks[b] &= ~((<long long> 1) << i)
    st.masks[nblocks] = (<long long> 1) << i
    st.labels[i] = nblocks
    _dfs(st, i + 1, nblocks + 1)
    st.masks[nblocks] = 0


def partition_search(double[::1] subset_cost, int n, double beta):
    """Minimise ``sum(subset_cost[block]) + beta * n_blocks`` over all set partitions.

    ``subset_cost`` is indexed by block bitmask (length ``2**n``). Partitions
    are visited as restricted-growth strings in lexicographic order; ties keep
    the first minimiser. Returns ``(best, labels, n_visited)``.
    """
    if n < 1 or n > 30:
        raise ValueError("n must be in [1, 30]")
    if subset_cost.shape[0] != (1 << n):
        raise ValueError("subset_cost must have length 2**n")
    cdef _Search st
    st.n = n
    st.beta = beta
    st.cost = &subset_cost[0]
    st.masks = <long long *> malloc(n * sizeof(long long))
    st.labels = <int *> malloc(n * sizeof(int))
    st.best_labels = <int *> malloc(n * sizeof(int))
    st.best = float("inf")
    st.count = 0
    cdef int k
    try:
        for k in range(n):
            st.masks[k] = 0
            st.labels[k] = 0
            st.best_labels[k] = 0
        st.masks[0] = 1
        with nogil:
            _dfs(&st, 1, 1)
        labels = np.array([st.best_labels[k] for k in range(n)], dtype=np.int64)
    finally:
        free(st.masks)
        free(st.labels)
        free(st.best_labels)
    return st.best, labels, int(st.count)
