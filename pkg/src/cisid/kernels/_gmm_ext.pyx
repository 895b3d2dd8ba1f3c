# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled diagonal-GMM kernels (fused single pass over frames).

Same contract as ``cisid.kernels._numpy_backend``; see that module for the
parameter layout.  The numpy lane evaluates the quadratic form with GEMMs
and materializes (block, K) scratch matrices, while this one streams frames
through a fused loop: log densities, log-sum-exp and statistic accumulation
per frame without intermediate matrices.

Parallelism: frames are split across OpenMP threads with a static schedule
and per-thread partial accumulators, reduced in thread order afterwards.
Results are bit-stable for a fixed thread count; changing the thread count
may perturb last-bit sums.
"""

import numpy as np

cimport numpy as cnp
from cython.parallel cimport parallel, prange, threadid
from libc.math cimport exp, log

cnp.import_array()

NAME = "cython"


def frame_loglik(x, log_w, means, inv_var, log_norm, int num_threads=1):
    """Per-frame mixture log-likelihoods, shape (T,)."""
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] lw = np.ascontiguousarray(log_w, dtype=np.float64)
    cdef double[:, ::1] mu = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] iv = np.ascontiguousarray(inv_var, dtype=np.float64)
    cdef double[::1] ln = np.ascontiguousarray(log_norm, dtype=np.float64)

    cdef Py_ssize_t T = xv.shape[0]
    cdef Py_ssize_t D = xv.shape[1]
    cdef Py_ssize_t K = lw.shape[0]
    cdef int nt = num_threads if num_threads > 0 else 1

    out_arr = np.empty(T, dtype=np.float64)
    cdef double[::1] out = out_arr
    scratch_arr = np.empty((nt, K), dtype=np.float64)
    cdef double[:, ::1] scratch = scratch_arr

    cdef Py_ssize_t t, k, d
    cdef int tid
    cdef double acc, diff, lp, hi, sumexp

    with nogil, parallel(num_threads=nt):
        for t in prange(T, schedule="static"):
            tid = threadid()
            hi = -1e300
            for k in range(K):
                acc = 0.0
                for d in range(D):
                    diff = xv[t, d] - mu[k, d]
                    acc = acc + diff * diff * iv[k, d]
                lp = lw[k] + ln[k] - 0.5 * acc
                scratch[tid, k] = lp
                if lp > hi:
                    hi = lp
            sumexp = 0.0
            for k in range(K):
                sumexp = sumexp + exp(scratch[tid, k] - hi)
            out[t] = hi + log(sumexp)
    return out_arr


def accumulate_stats(x, log_w, means, inv_var, log_norm, bint want_s=False,
                     int num_threads=1):
    """Fused E-step accumulation; see the numpy backend for the contract."""
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] lw = np.ascontiguousarray(log_w, dtype=np.float64)
    cdef double[:, ::1] mu = np.ascontiguousarray(means, dtype=np.float64)
    cdef double[:, ::1] iv = np.ascontiguousarray(inv_var, dtype=np.float64)
    cdef double[::1] ln = np.ascontiguousarray(log_norm, dtype=np.float64)

    cdef Py_ssize_t T = xv.shape[0]
    cdef Py_ssize_t D = xv.shape[1]
    cdef Py_ssize_t K = lw.shape[0]
    cdef int nt = num_threads if num_threads > 0 else 1

    part_ll_arr = np.zeros(nt, dtype=np.float64)
    part_n_arr = np.zeros((nt, K), dtype=np.float64)
    part_f_arr = np.zeros((nt, K, D), dtype=np.float64)
    if want_s:
        part_s_arr = np.zeros((nt, K, D), dtype=np.float64)
    else:
        part_s_arr = np.zeros((1, 1, 1), dtype=np.float64)
    scratch_arr = np.empty((nt, K), dtype=np.float64)

    cdef double[::1] part_ll = part_ll_arr
    cdef double[:, ::1] part_n = part_n_arr
    cdef double[:, :, ::1] part_f = part_f_arr
    cdef double[:, :, ::1] part_s = part_s_arr
    cdef double[:, ::1] scratch = scratch_arr

    cdef Py_ssize_t t, k, d
    cdef int tid
    cdef double acc, diff, lp, hi, sumexp, g, xtd

    with nogil, parallel(num_threads=nt):
        for t in prange(T, schedule="static"):
            tid = threadid()
            hi = -1e300
            for k in range(K):
                acc = 0.0
                for d in range(D):
                    diff = xv[t, d] - mu[k, d]
                    acc = acc + diff * diff * iv[k, d]
                lp = lw[k] + ln[k] - 0.5 * acc
                scratch[tid, k] = lp
                if lp > hi:
                    hi = lp
            sumexp = 0.0
            for k in range(K):
                scratch[tid, k] = exp(scratch[tid, k] - hi)
                sumexp = sumexp + scratch[tid, k]
            part_ll[tid] += hi + log(sumexp)
            for k in range(K):
                g = scratch[tid, k] / sumexp
                part_n[tid, k] += g
                for d in range(D):
                    xtd = xv[t, d]
                    part_f[tid, k, d] += g * xtd
                    if want_s:
                        part_s[tid, k, d] += g * xtd * xtd

    ll_sum = float(np.sum(part_ll_arr))  # nt terms, thread order
    n = part_n_arr.sum(axis=0)
    f = part_f_arr.sum(axis=0)
    s = part_s_arr.sum(axis=0) if want_s else None
    return ll_sum, n, f, s
