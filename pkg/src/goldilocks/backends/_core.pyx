# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Same contracts as ``goldilocks.backends.reference``; see that module for
the forward-pass definition. Loops are written out so the per-call
overhead stays small for the many tiny matrices this workload produces.
"""

from libc.math cimport exp, sqrt, tanh

import numpy as np

NAME = "cython"


def teacher_predict(double[:, ::1] feats, double[:, ::1] enc_w,
                    double[::1] enc_b, double[::1] head_w, double head_b,
                    int positions, bint mean_pool):
    """Utility predictions for a batch of feature rows, each in (0, 0.5)."""
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t f = feats.shape[1]
    cdef Py_ssize_t ph = enc_w.shape[0]
    cdef Py_ssize_t h = head_w.shape[0]
    cdef Py_ssize_t i, j, k, p
    cdef double z, u, acc
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] out_v = out
    act = np.empty(ph, dtype=np.float64)
    cdef double[::1] act_v = act
    pooled = np.empty(h, dtype=np.float64)
    cdef double[::1] pooled_v = pooled

    for i in range(n):
        for j in range(ph):
            z = enc_b[j]
            for k in range(f):
                z += enc_w[j, k] * feats[i, k]
            act_v[j] = tanh(z)
        if mean_pool:
            for k in range(h):
                acc = 0.0
                for p in range(positions):
                    acc += act_v[p * h + k]
                pooled_v[k] = acc / positions
        else:
            for k in range(h):
                pooled_v[k] = act_v[(positions - 1) * h + k]
        u = head_b
        for k in range(h):
            u += head_w[k] * pooled_v[k]
        out_v[i] = 0.5 / (1.0 + exp(-u))
    return out


def teacher_batch_grads(double[:, ::1] feats, double[::1] targets,
                        double[:, ::1] enc_w, double[::1] enc_b,
                        double[::1] head_w, double head_b,
                        int positions, bint mean_pool):
    """Batch-mean MSE, its gradients, and the predictions themselves."""
    cdef Py_ssize_t n = feats.shape[0]
    cdef Py_ssize_t f = feats.shape[1]
    cdef Py_ssize_t ph = enc_w.shape[0]
    cdef Py_ssize_t h = head_w.shape[0]
    cdef Py_ssize_t i, j, k, p
    cdef double z, u, acc, sig, pred, err, du, dz, mse = 0.0

    preds = np.empty(n, dtype=np.float64)
    g_enc_w = np.zeros((ph, f), dtype=np.float64)
    g_enc_b = np.zeros(ph, dtype=np.float64)
    g_head_w = np.zeros(h, dtype=np.float64)
    cdef double g_head_b = 0.0
    cdef double[::1] preds_v = preds
    cdef double[:, ::1] g_enc_w_v = g_enc_w
    cdef double[::1] g_enc_b_v = g_enc_b
    cdef double[::1] g_head_w_v = g_head_w

    act = np.empty(ph, dtype=np.float64)
    cdef double[::1] act_v = act
    pooled = np.empty(h, dtype=np.float64)
    cdef double[::1] pooled_v = pooled
    dpooled = np.empty(h, dtype=np.float64)
    cdef double[::1] dpooled_v = dpooled

    for i in range(n):
        for j in range(ph):
            z = enc_b[j]
            for k in range(f):
                z += enc_w[j, k] * feats[i, k]
            act_v[j] = tanh(z)
        if mean_pool:
            for k in range(h):
                acc = 0.0
                for p in range(positions):
                    acc += act_v[p * h + k]
                pooled_v[k] = acc / positions
        else:
            for k in range(h):
                pooled_v[k] = act_v[(positions - 1) * h + k]
        u = head_b
        for k in range(h):
            u += head_w[k] * pooled_v[k]
        sig = 1.0 / (1.0 + exp(-u))
        pred = 0.5 * sig
        preds_v[i] = pred
        err = pred - targets[i]
        mse += err * err

        du = (2.0 / n) * err * 0.5 * sig * (1.0 - sig)
        g_head_b += du
        for k in range(h):
            g_head_w_v[k] += du * pooled_v[k]
            dpooled_v[k] = du * head_w[k]
        for j in range(ph):
            if mean_pool:
                dz = dpooled_v[j % h] / positions
            else:
                dz = dpooled_v[j % h] if j >= (positions - 1) * h else 0.0
            dz *= 1.0 - act_v[j] * act_v[j]
            if dz != 0.0:
                g_enc_b_v[j] += dz
                for k in range(f):
                    g_enc_w_v[j, k] += dz * feats[i, k]
    return preds, mse / n, g_enc_w, g_enc_b, g_head_w, g_head_b


def group_normalize(double[::1] rewards):
    """Group-relative normalization; see the reference backend docstring."""
    cdef Py_ssize_t g = rewards.shape[0]
    cdef Py_ssize_t i
    cdef double total = 0.0, lo = rewards[0], hi = rewards[0]
    for i in range(g):
        total += rewards[i]
        if rewards[i] < lo:
            lo = rewards[i]
        if rewards[i] > hi:
            hi = rewards[i]
    cdef double mean = total / g
    adv = np.zeros(g, dtype=np.float64)
    cdef double[::1] adv_v = adv
    if lo == hi:
        return adv, mean, 0.0
    cdef double var = 0.0, d
    for i in range(g):
        d = rewards[i] - mean
        var += d * d
    cdef double std = sqrt(var / g)
    for i in range(g):
        adv_v[i] = (rewards[i] - mean) / std
    return adv, mean, std
