# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loss kernels. Same contract as ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()


cdef int _normalize(double[:, ::1] H, double[:, ::1] U, double[::1] norms) nogil:
    cdef Py_ssize_t i, k
    cdef Py_ssize_t n = H.shape[0], d = H.shape[1]
    cdef double acc
    for i in range(n):
        acc = 0.0
        for k in range(d):
            acc += H[i, k] * H[i, k]
        if acc == 0.0:
            return -1
        norms[i] = sqrt(acc)
        for k in range(d):
            U[i, k] = H[i, k] / norms[i]
    return 0


cdef void _project_back(double[:, ::1] gU, double[:, ::1] U, double[::1] norms, double[:, ::1] out) nogil:
    cdef Py_ssize_t i, k
    cdef Py_ssize_t n = U.shape[0], d = U.shape[1]
    cdef double dot
    for i in range(n):
        dot = 0.0
        for k in range(d):
            dot += gU[i, k] * U[i, k]
        for k in range(d):
            out[i, k] = (gU[i, k] - dot * U[i, k]) / norms[i]


cdef inline double _dot(double[:, ::1] A, Py_ssize_t i, double[:, ::1] B, Py_ssize_t j) nogil:
    cdef Py_ssize_t k
    cdef double acc = 0.0
    for k in range(A.shape[1]):
        acc += A[i, k] * B[j, k]
    return acc


def contrastive(Hc, Hs, double temperature, positives):
    cdef double[:, ::1] hc = np.ascontiguousarray(Hc, dtype=np.float64)
    cdef double[:, ::1] hs = np.ascontiguousarray(Hs, dtype=np.float64)
    cdef cnp.int64_t[::1] pos = np.ascontiguousarray(positives, dtype=np.int64)
    cdef Py_ssize_t n = hc.shape[0], d = hc.shape[1]
    cdef Py_ssize_t i, j
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if hs.shape[0] != n or hs.shape[1] != d or pos.shape[0] != n:
        raise ValueError("shape mismatch")
    for i in range(n):
        if pos[i] >= n or pos[i] == i:
            raise ValueError("invalid positive index")

    U_arr = np.empty((n, d)); V_arr = np.empty((n, d))
    nc_arr = np.empty(n); ns_arr = np.empty(n)
    cdef double[:, ::1] U = U_arr, V = V_arr
    cdef double[::1] nc = nc_arr, ns = ns_arr
    if _normalize(hc, U, nc) < 0:
        raise ValueError("context batch has a zero-norm row; cosine similarity is undefined")
    if _normalize(hs, V, ns) < 0:
        raise ValueError("state batch has a zero-norm row; cosine similarity is undefined")

    # similarities and the final gradient products go through BLAS; the
    # masked log-sum-exp and the per-pair weights are the compiled part
    scc_arr = (U_arr @ U_arr.T) / temperature
    scs_arr = (U_arr @ V_arr.T) / temperature
    wcc_arr = np.zeros((n, n)); wcs_arr = np.empty((n, n))
    cdef double[:, ::1] scc = scc_arr, scs = scs_arr, wcc = wcc_arr, wcs = wcs_arr
    cdef double scale = 1.0 / (n * temperature)
    cdef double m, z, log_z, numer, total = 0.0

    with nogil:
        for i in range(n):
            m = -INFINITY
            for j in range(n):
                if j != i and scc[i, j] > m:
                    m = scc[i, j]
                if scs[i, j] > m:
                    m = scs[i, j]
            z = 0.0
            for j in range(n):
                if j != i:
                    z += exp(scc[i, j] - m)
                z += exp(scs[i, j] - m)
            log_z = m + log(z)
            numer = scs[i, i] if pos[i] < 0 else scc[i, pos[i]]
            total += log_z - numer
            # d loss / d similarity
            for j in range(n):
                if j != i:
                    wcc[i, j] = exp(scc[i, j] - log_z) * scale
                wcs[i, j] = exp(scs[i, j] - log_z) * scale
            if pos[i] < 0:
                wcs[i, i] -= scale
            else:
                wcc[i, pos[i]] -= scale

    gU_arr = (wcc_arr + wcc_arr.T) @ U_arr + wcs_arr @ V_arr
    gV_arr = wcs_arr.T @ U_arr
    gc_arr = np.empty((n, d)); gs_arr = np.empty((n, d))
    cdef double[:, ::1] gU = gU_arr, gV = gV_arr, gc = gc_arr, gs = gs_arr
    with nogil:
        _project_back(gU, U, nc, gc)
        _project_back(gV, V, ns, gs)
    return total / n, gc_arr, gs_arr


def variant(Hc, Hs):
    cdef double[:, ::1] hc = np.ascontiguousarray(Hc, dtype=np.float64)
    cdef double[:, ::1] hs = np.ascontiguousarray(Hs, dtype=np.float64)
    cdef Py_ssize_t n = hc.shape[0], d = hc.shape[1]
    cdef Py_ssize_t i, k
    if hs.shape[0] != n or hs.shape[1] != d:
        raise ValueError("shape mismatch")
    U_arr = np.empty((n, d)); V_arr = np.empty((n, d))
    nc_arr = np.empty(n); ns_arr = np.empty(n)
    cdef double[:, ::1] U = U_arr, V = V_arr
    cdef double[::1] nc = nc_arr, ns = ns_arr
    if _normalize(hc, U, nc) < 0:
        raise ValueError("context batch has a zero-norm row; cosine similarity is undefined")
    if _normalize(hs, V, ns) < 0:
        raise ValueError("state batch has a zero-norm row; cosine similarity is undefined")
    gU_arr = np.empty((n, d)); gV_arr = np.empty((n, d))
    gc_arr = np.empty((n, d)); gs_arr = np.empty((n, d))
    cdef double[:, ::1] gU = gU_arr, gV = gV_arr, gc = gc_arr, gs = gs_arr
    cdef double total = 0.0
    cdef double w = -1.0 / n
    with nogil:
        for i in range(n):
            total += 1.0 - _dot(U, i, V, i)
            for k in range(d):
                gU[i, k] = w * V[i, k]
                gV[i, k] = w * U[i, k]
        _project_back(gU, U, nc, gc)
        _project_back(gV, V, ns, gs)
    return total / n, gc_arr, gs_arr


def token_nll(logits, targets, cnp.int64_t pad_id):
    cdef double[:, ::1] x = np.ascontiguousarray(logits, dtype=np.float64)
    cdef cnp.int64_t[::1] y = np.ascontiguousarray(targets, dtype=np.int64)
    cdef Py_ssize_t rows = x.shape[0], v = x.shape[1]
    cdef Py_ssize_t i, k, count = 0
    if y.shape[0] != rows:
        raise ValueError("shape mismatch")
    for i in range(rows):
        if y[i] != pad_id:
            count += 1
    if count == 0:
        raise ValueError("target contains only padding")
    grad_arr = np.zeros((rows, v))
    cdef double[:, ::1] g = grad_arr
    cdef double m, s, total = 0.0
    cdef double inv = 1.0 / count
    with nogil:
        for i in range(rows):
            if y[i] == pad_id:
                continue
            m = x[i, 0]
            for k in range(1, v):
                if x[i, k] > m:
                    m = x[i, k]
            s = 0.0
            for k in range(v):
                g[i, k] = exp(x[i, k] - m)
                s += g[i, k]
            total += m + log(s) - x[i, y[i]]
            for k in range(v):
                g[i, k] = g[i, k] / s * inv
            g[i, y[i]] -= inv
    return total / count, grad_arr
