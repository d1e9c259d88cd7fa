# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused training kernel; same contract as ``_kernels_py.fused_aggregate_asl``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, pow

cnp.import_array()


cdef inline double _softplus(double x) nogil:
    if x > 0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline void _asl(double z, int y, double gp, double gn, double c,
                      double* loss, double* grad) noexcept nogil:
    cdef double e = exp(-fabs(z))
    cdef double p, q, log_p, q_gp, p_c, one_m, log_1m, ratio, pc_gn, focus
    if z >= 0:
        p = 1.0 / (1.0 + e)
        q = e / (1.0 + e)
    else:
        p = e / (1.0 + e)
        q = 1.0 / (1.0 + e)
    if y == 1:
        log_p = -_softplus(-z)
        q_gp = pow(q, gp)
        loss[0] = -q_gp * log_p
        grad[0] = q_gp * (gp * p * log_p - q)
        return
    p_c = p - c
    if p_c <= 0:
        loss[0] = 0.0
        grad[0] = 0.0
        return
    one_m = q + c
    if c > 0:
        log_1m = log(one_m)
        ratio = q / one_m
    else:
        log_1m = -_softplus(z)
        ratio = 1.0
    pc_gn = pow(p_c, gn)
    loss[0] = -pc_gn * log_1m
    focus = 0.0
    if gn != 0:
        focus = gn * p * q * pow(p_c, gn - 1.0) * log_1m
    grad[0] = p * pc_gn * ratio - focus


def fused_aggregate_asl(const double[:, :, ::1] pos, const double[:, :, ::1] neg,
                        const signed char[:, ::1] labels, int mode, double spatial_temp,
                        double tau, double gamma_pos, double gamma_neg, double margin):
    cdef Py_ssize_t B = pos.shape[0], R = pos.shape[1], M = pos.shape[2]
    cdef Py_ssize_t b, i, m, best
    cdef double mx, tot, sp, sn, v, a, l, g, loss_sum = 0.0
    cdef long n_known = 0
    cdef int y

    s_pos_arr = np.empty((B, M), dtype=np.float64)
    s_neg_arr = np.empty((B, M), dtype=np.float64)
    d_pos_arr = np.zeros((B, R, M), dtype=np.float64)
    d_neg_arr = np.zeros((B, R, M), dtype=np.float64)
    w_arr = np.empty(R, dtype=np.float64)
    cdef double[:, ::1] s_pos = s_pos_arr
    cdef double[:, ::1] s_neg = s_neg_arr
    cdef double[:, :, ::1] d_pos = d_pos_arr
    cdef double[:, :, ::1] d_neg = d_neg_arr
    cdef double[::1] w = w_arr

    with nogil:
        for b in range(B):
            for m in range(M):
                best = 0
                if mode == 0:
                    mx = pos[b, 0, m]
                    for i in range(1, R):
                        if pos[b, i, m] > mx:
                            mx = pos[b, i, m]
                    tot = 0.0
                    for i in range(R):
                        v = exp((pos[b, i, m] - mx) / spatial_temp)
                        w[i] = v
                        tot = tot + v
                    sp = 0.0
                    sn = 0.0
                    for i in range(R):
                        w[i] = w[i] / tot
                        sp = sp + w[i] * pos[b, i, m]
                        sn = sn + w[i] * neg[b, i, m]
                elif mode == 1:
                    sp = 0.0
                    sn = 0.0
                    for i in range(R):
                        sp = sp + pos[b, i, m]
                        sn = sn + neg[b, i, m]
                    sp = sp / R
                    sn = sn / R
                else:
                    for i in range(1, R):
                        if pos[b, i, m] > pos[b, best, m]:
                            best = i
                    sp = pos[b, best, m]
                    sn = neg[b, best, m]
                s_pos[b, m] = sp
                s_neg[b, m] = sn

                y = labels[b, m]
                if y == 0:
                    continue
                _asl((sp - sn) / tau, y, gamma_pos, gamma_neg, margin, &l, &g)
                loss_sum = loss_sum + l
                n_known = n_known + 1
                a = g / tau
                if mode == 0:
                    for i in range(R):
                        d_pos[b, i, m] = a * w[i] * (1.0 + ((pos[b, i, m] - sp) - (neg[b, i, m] - sn)) / spatial_temp)
                        d_neg[b, i, m] = -a * w[i]
                elif mode == 1:
                    for i in range(R):
                        d_pos[b, i, m] = a / R
                        d_neg[b, i, m] = -a / R
                else:
                    d_pos[b, best, m] = a
                    d_neg[b, best, m] = -a

    return loss_sum, int(n_known), s_pos_arr, s_neg_arr, d_pos_arr, d_neg_arr
