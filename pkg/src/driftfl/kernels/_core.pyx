# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-batch kernels.

Same contract as kernels._numpy; the loops below avoid per-call numpy
overhead, which dominates at the small matrix sizes the simulator uses.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

DEF PROB_FLOOR = 1e-12

BACKEND = "compiled"


def forward_batch(double[:, ::1] W1, double[::1] b1,
                  double[:, ::1] W2, double[::1] b2,
                  double[:, ::1] X):
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0], k = W2.shape[0]
    H_arr = np.empty((n, h), dtype=np.float64)
    P_arr = np.empty((n, k), dtype=np.float64)
    cdef double[:, ::1] H = H_arr
    cdef double[:, ::1] P = P_arr
    cdef Py_ssize_t i, j, m
    cdef double acc, mx, s

    with nogil:
        for i in range(n):
            for j in range(h):
                acc = b1[j]
                for m in range(d):
                    acc += W1[j, m] * X[i, m]
                H[i, j] = acc if acc > 0.0 else 0.0
            mx = -1e308
            for j in range(k):
                acc = b2[j]
                for m in range(h):
                    acc += W2[j, m] * H[i, m]
                P[i, j] = acc
                if acc > mx:
                    mx = acc
            s = 0.0
            for j in range(k):
                P[i, j] = exp(P[i, j] - mx)
                s += P[i, j]
            for j in range(k):
                P[i, j] /= s
    return H_arr, P_arr


def risk_grads(double[:, ::1] W1, double[::1] b1,
               double[:, ::1] W2, double[::1] b2,
               double[:, ::1] X, long[::1] labels,
               double[::1] coef, bint head_only):
    # single fused pass per sample: forward, softmax, backprop accumulation,
    # with the per-sample hidden/probability vectors kept in small scratch
    # buffers instead of (n, h)/(n, k) intermediates
    cdef Py_ssize_t n = X.shape[0], d = X.shape[1]
    cdef Py_ssize_t h = W1.shape[0], k = W2.shape[0]

    gW1_arr = np.zeros((h, d), dtype=np.float64)
    gb1_arr = np.zeros(h, dtype=np.float64)
    gW2_arr = np.zeros((k, h), dtype=np.float64)
    gb2_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] gW1 = gW1_arr
    cdef double[::1] gb1 = gb1_arr
    cdef double[:, ::1] gW2 = gW2_arr
    cdef double[::1] gb2 = gb2_arr

    scratch = np.empty(2 * h + k, dtype=np.float64)
    cdef double[::1] hid = scratch[:h]
    cdef double[::1] dh = scratch[h:2 * h]
    cdef double[::1] dlog = scratch[2 * h:]

    cdef Py_ssize_t i, j, m
    cdef long y
    cdef double loss = 0.0, p_true, c, acc, mx, s

    with nogil:
        for i in range(n):
            for j in range(h):
                acc = b1[j]
                for m in range(d):
                    acc += W1[j, m] * X[i, m]
                hid[j] = acc if acc > 0.0 else 0.0
            mx = -1e308
            for j in range(k):
                acc = b2[j]
                for m in range(h):
                    acc += W2[j, m] * hid[m]
                dlog[j] = acc
                if acc > mx:
                    mx = acc
            s = 0.0
            for j in range(k):
                dlog[j] = exp(dlog[j] - mx)
                s += dlog[j]
            y = labels[i]
            p_true = dlog[y] / s
            if p_true <= PROB_FLOOR:
                loss += -coef[i] * log(PROB_FLOOR)
                c = 0.0
            else:
                loss += -coef[i] * log(p_true)
                c = coef[i]
            for j in range(k):
                dlog[j] = c * (dlog[j] / s)
            dlog[y] -= c
            for j in range(k):
                gb2[j] += dlog[j]
                for m in range(h):
                    gW2[j, m] += dlog[j] * hid[m]
            if not head_only:
                for m in range(h):
                    if hid[m] > 0.0:
                        acc = 0.0
                        for j in range(k):
                            acc += dlog[j] * W2[j, m]
                        dh[m] = acc
                    else:
                        dh[m] = 0.0
                for m in range(h):
                    if dh[m] != 0.0:
                        gb1[m] += dh[m]
                        for j in range(d):
                            gW1[m, j] += dh[m] * X[i, j]
    return loss, gW1_arr, gb1_arr, gW2_arr, gb2_arr
