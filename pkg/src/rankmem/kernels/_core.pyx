# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot-loop kernels.

Mirrors ``reference.py`` exactly; see that module for layouts, shape
contracts, and the activation definition.  Every inner loop is written in
accumulate-into-contiguous-row (SAXPY) form so the C compiler can
vectorize it without reassociating reductions; that is also why forward
kernels take input-major weight layouts and backward kernels take the
canonical ones.
"""

import numpy as np

from libc.math cimport exp, sqrt

cdef double GELU_C1 = sqrt(2.0 / 3.141592653589793)
cdef double GELU_C2 = 0.044715


cdef inline double _act_sig(double y) noexcept nogil:
    return 1.0 / (1.0 + exp(-2.0 * GELU_C1 * (y + GELU_C2 * y * y * y)))


cdef inline double _act_grad(double y, double sig) noexcept nogil:
    return sig + y * sig * (1.0 - sig) * 2.0 * GELU_C1 * (1.0 + 3.0 * GELU_C2 * y * y)


def gelu(double[:, ::1] y):
    cdef Py_ssize_t i, j
    act_arr = np.empty((y.shape[0], y.shape[1]))
    sig_arr = np.empty((y.shape[0], y.shape[1]))
    cdef double[:, ::1] act = act_arr
    cdef double[:, ::1] sig = sig_arr
    cdef double p
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            p = _act_sig(y[i, j])
            sig[i, j] = p
            act[i, j] = y[i, j] * p
    return act_arr, sig_arr


def gelu_grad(double[:, ::1] y, double[:, ::1] sig):
    cdef Py_ssize_t i, j
    out_arr = np.empty((y.shape[0], y.shape[1]))
    cdef double[:, ::1] out = out_arr
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            out[i, j] = _act_grad(y[i, j], sig[i, j])
    return out_arr


def mlp_stack_forward(double[:, ::1] h, double[:, :, ::1] wt, double[:, ::1] bias):
    cdef Py_ssize_t n = wt.shape[0], batch = h.shape[0], width = h.shape[1]
    cdef Py_ssize_t i, b, o, k
    cdef double hk, p
    acts_arr = np.empty((n + 1, batch, width))
    pre_arr = np.empty((n, batch, width))
    sig_arr = np.empty((n, batch, width))
    cdef double[:, :, ::1] acts = acts_arr
    cdef double[:, :, ::1] pre = pre_arr
    cdef double[:, :, ::1] sig = sig_arr
    acts_arr[0] = np.asarray(h)
    for i in range(n):
        for b in range(batch):
            for o in range(width):
                pre[i, b, o] = bias[i, o]
            for k in range(width):
                hk = acts[i, b, k]
                for o in range(width):
                    pre[i, b, o] += hk * wt[i, k, o]
            for o in range(width):
                p = _act_sig(pre[i, b, o])
                sig[i, b, o] = p
                acts[i + 1, b, o] = pre[i, b, o] * p
    return acts_arr, pre_arr, sig_arr


def mlp_stack_backward(double[:, ::1] d_out, double[:, :, ::1] acts,
                       double[:, :, ::1] preacts, double[:, :, ::1] sig,
                       double[:, :, ::1] w):
    cdef Py_ssize_t n = w.shape[0], batch = d_out.shape[0], width = d_out.shape[1]
    cdef Py_ssize_t i, b, o, k
    cdef double dp
    dw_arr = np.zeros((n, width, width))
    dbias_arr = np.zeros((n, width))
    dh_arr = np.array(np.asarray(d_out), copy=True)
    dh_next_arr = np.empty((batch, width))
    cdef double[:, :, ::1] dw = dw_arr
    cdef double[:, ::1] dbias = dbias_arr
    cdef double[:, ::1] dh = dh_arr
    cdef double[:, ::1] dh_next = dh_next_arr
    for i in range(n - 1, -1, -1):
        dh_next_arr[:] = 0.0
        for b in range(batch):
            for o in range(width):
                dp = dh[b, o] * _act_grad(preacts[i, b, o], sig[i, b, o])
                dbias[i, o] += dp
                for k in range(width):
                    dw[i, o, k] += dp * acts[i, b, k]
                for k in range(width):
                    dh_next[b, k] += dp * w[i, o, k]
        dh_arr, dh_next_arr = dh_next_arr, dh_arr
        dh = dh_arr
        dh_next = dh_next_arr
    return dh_arr, dw_arr, dbias_arr


def adapter_block_forward(double[:, ::1] h, double[:, :, ::1] wt, double[:, ::1] bias,
                          double[:, :, ::1] at, double[:, :, ::1] bmt, double[::1] g,
                          double[:, :, ::1] s_op, double scale):
    cdef Py_ssize_t n = wt.shape[0], batch = h.shape[0], width = h.shape[1]
    cdef Py_ssize_t rank = at.shape[2]
    cdef Py_ssize_t i, b, o, k, q
    cdef double acc, gi, hk, tq, p
    acts_arr = np.empty((n + 1, batch, width))
    pre_arr = np.empty((n, batch, width))
    sig_arr = np.empty((n, batch, width))
    s_arr = np.empty((n, batch, rank))
    d_arr = np.empty((n, batch, rank))
    t_arr = np.empty((n, batch, rank))
    cdef double[:, :, ::1] acts = acts_arr
    cdef double[:, :, ::1] pre = pre_arr
    cdef double[:, :, ::1] sig = sig_arr
    cdef double[:, :, ::1] s_st = s_arr
    cdef double[:, :, ::1] d_st = d_arr
    cdef double[:, :, ::1] t_st = t_arr
    acts_arr[0] = np.asarray(h)
    for i in range(n):
        gi = g[i]
        for b in range(batch):
            for q in range(rank):
                s_st[i, b, q] = 0.0
            for k in range(width):
                hk = acts[i, b, k]
                for q in range(rank):
                    s_st[i, b, q] += hk * at[i, k, q]
            for q in range(rank):
                acc = 0.0
                for k in range(rank):
                    acc += s_op[b, q, k] * s_st[i, b, k]
                d_st[i, b, q] = acc
                t_st[i, b, q] = s_st[i, b, q] + gi * acc
            for o in range(width):
                pre[i, b, o] = bias[i, o]
            for k in range(width):
                hk = acts[i, b, k]
                for o in range(width):
                    pre[i, b, o] += hk * wt[i, k, o]
            for q in range(rank):
                tq = scale * t_st[i, b, q]
                for o in range(width):
                    pre[i, b, o] += tq * bmt[i, q, o]
            for o in range(width):
                p = _act_sig(pre[i, b, o])
                sig[i, b, o] = p
                acts[i + 1, b, o] = pre[i, b, o] * p
    return acts_arr, pre_arr, sig_arr, s_arr, d_arr, t_arr


def adapter_block_backward(double[:, ::1] d_out, double[:, :, ::1] acts,
                           double[:, :, ::1] preacts, double[:, :, ::1] sig,
                           double[:, :, ::1] s_st, double[:, :, ::1] d_st,
                           double[:, :, ::1] t_st, double[:, :, ::1] w,
                           double[:, :, ::1] a, double[:, :, ::1] bm, double[::1] g,
                           double[:, :, ::1] s_op, double scale,
                           double[:, ::1] ds_extra):
    cdef Py_ssize_t n = w.shape[0], batch = d_out.shape[0], width = d_out.shape[1]
    cdef Py_ssize_t rank = a.shape[1]
    cdef Py_ssize_t i, b, o, k, q
    cdef double dp, gi, dot, rq, dsq, sdp
    da_arr = np.zeros((n, rank, width))
    dbm_arr = np.zeros((n, width, rank))
    gate_arr = np.zeros(n)
    r_arr = np.empty((n, batch, rank))
    dsop_arr = np.zeros((batch, rank, rank))
    dh_arr = np.array(np.asarray(d_out), copy=True)
    dh_next_arr = np.empty((batch, width))
    dpre_arr = np.empty(width)
    ds_arr = np.empty(rank)
    cdef double[:, :, ::1] da = da_arr
    cdef double[:, :, ::1] dbm = dbm_arr
    cdef double[::1] gate_dot = gate_arr
    cdef double[:, :, ::1] r_st = r_arr
    cdef double[:, :, ::1] dsop = dsop_arr
    cdef double[:, ::1] dh = dh_arr
    cdef double[:, ::1] dh_next = dh_next_arr
    cdef double[::1] dpre = dpre_arr
    cdef double[::1] ds = ds_arr
    for i in range(n - 1, -1, -1):
        gi = g[i]
        dh_next_arr[:] = 0.0
        dot = 0.0
        for b in range(batch):
            for q in range(rank):
                ds[q] = 0.0
            for o in range(width):
                dp = dh[b, o] * _act_grad(preacts[i, b, o], sig[i, b, o])
                dpre[o] = dp
                sdp = scale * dp
                for q in range(rank):
                    dbm[i, o, q] += sdp * t_st[i, b, q]
                for q in range(rank):
                    ds[q] += sdp * bm[i, o, q]
            # ds currently holds r_i = dL/dt for this layer
            for q in range(rank):
                rq = ds[q]
                r_st[i, b, q] = rq
                dot += rq * d_st[i, b, q]
                for k in range(rank):
                    dsop[b, q, k] += gi * rq * s_st[i, b, k]
            # dL/ds = r + g S^T r + ds_extra
            for q in range(rank):
                ds[q] = r_st[i, b, q] + ds_extra[b, q]
            for k in range(rank):
                rq = gi * r_st[i, b, k]
                for q in range(rank):
                    ds[q] += rq * s_op[b, k, q]
            for q in range(rank):
                dsq = ds[q]
                for k in range(width):
                    da[i, q, k] += dsq * acts[i, b, k]
                for k in range(width):
                    dh_next[b, k] += dsq * a[i, q, k]
            for o in range(width):
                dp = dpre[o]
                for k in range(width):
                    dh_next[b, k] += dp * w[i, o, k]
        gate_dot[i] = dot
        dh_arr, dh_next_arr = dh_next_arr, dh_arr
        dh = dh_arr
        dh_next = dh_next_arr
    return dh_arr, da_arr, dbm_arr, gate_arr, dsop_arr, r_arr
