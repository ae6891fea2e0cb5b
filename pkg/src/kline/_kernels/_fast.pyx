# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the pure-numpy kernels.

Scope is deliberately narrow: the per-token attention step during
incremental decoding, the fused AdamW update, and single-row RMSNorm.
These are the spots where interpreter and allocation overhead dominate
at desk-scale sizes; the batched training matmuls stay on BLAS.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def attn_step(double[:, ::1] q, double[:, :, ::1] k_cache, double[:, :, ::1] v_cache):
    """One incremental-decoding attention step; mirrors pure.attn_step."""
    cdef Py_ssize_t H = q.shape[0]
    cdef Py_ssize_t dh = q.shape[1]
    cdef Py_ssize_t S = k_cache.shape[0]
    cdef cnp.ndarray[double, ndim=2] out_arr = np.zeros((H, dh), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef cnp.ndarray[double, ndim=1] scores_arr = np.empty(S, dtype=np.float64)
    cdef double[::1] scores = scores_arr
    cdef double inv_scale = 1.0 / sqrt(<double> dh)
    cdef Py_ssize_t h, s, d
    cdef double acc, mx, w, total

    with nogil:
        for h in range(H):
            mx = -1e300
            for s in range(S):
                acc = 0.0
                for d in range(dh):
                    acc += q[h, d] * k_cache[s, h, d]
                acc *= inv_scale
                scores[s] = acc
                if acc > mx:
                    mx = acc
            total = 0.0
            for s in range(S):
                w = exp(scores[s] - mx)
                scores[s] = w
                total += w
            for s in range(S):
                w = scores[s] / total
                for d in range(dh):
                    out[h, d] += w * v_cache[s, h, d]
    return out_arr


def rmsnorm_row(double[::1] x, double[::1] gain, double eps):
    """RMS-normalize one row; mirrors pure.rmsnorm_row."""
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[double, ndim=1] out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double ms = 0.0
    cdef double inv
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            ms += x[i] * x[i]
        inv = 1.0 / sqrt(ms / n + eps)
        for i in range(n):
            out[i] = x[i] * inv * gain[i]
    return out_arr


def adamw_update(
    double[::1] p,
    double[::1] g,
    double[::1] m,
    double[::1] v,
    double lr,
    double beta1,
    double beta2,
    double eps,
    double weight_decay,
    double bias_correction1,
    double bias_correction2,
):
    """Fused in-place AdamW update; mirrors pure.adamw_update."""
    cdef Py_ssize_t n = p.shape[0]
    cdef Py_ssize_t i
    cdef double mi, vi, m_hat, v_hat
    with nogil:
        for i in range(n):
            mi = m[i] * beta1 + (1.0 - beta1) * g[i]
            vi = v[i] * beta2 + (1.0 - beta2) * (g[i] * g[i])
            m[i] = mi
            v[i] = vi
            m_hat = mi / bias_correction1
            v_hat = vi / bias_correction2
            p[i] = p[i] - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p[i])
