# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels. Mirrors viewdiff.kernels._pykernels."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, pow

cnp.import_array()

BACKEND_NAME = "compiled"


def softmax_rows(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            out[i, j] = exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(m):
            out[i, j] /= s
    return out_arr


def softmax_rows_grad(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot += gy[i, j] * y[i, j]
        for j in range(m):
            out[i, j] = y[i, j] * (gy[i, j] - dot)
    return out_arr


def layer_norm_rows(double[:, ::1] x, double eps):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    y_arr = np.empty((n, m), dtype=np.float64)
    inv_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] inv = inv_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, d
    for i in range(n):
        mu = 0.0
        for j in range(m):
            mu += x[i, j]
        mu /= m
        var = 0.0
        for j in range(m):
            d = x[i, j] - mu
            var += d * d
        var /= m
        inv[i] = 1.0 / sqrt(var + eps)
        for j in range(m):
            y[i, j] = (x[i, j] - mu) * inv[i]
    return y_arr, inv_arr


def layer_norm_rows_grad(double[:, ::1] y, double[::1] inv_std, double[:, ::1] gy):
    cdef Py_ssize_t n = y.shape[0], m = y.shape[1]
    out_arr = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double m1, m2
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(m):
            m1 += gy[i, j]
            m2 += gy[i, j] * y[i, j]
        m1 /= m
        m2 /= m
        for j in range(m):
            out[i, j] = inv_std[i] * (gy[i, j] - m1 - y[i, j] * m2)
    return out_arr


def scatter_add_rows(double[:, ::1] out, long long[::1] idx, double[:, ::1] src):
    cdef Py_ssize_t n = src.shape[0], m = src.shape[1]
    cdef Py_ssize_t i, j, r
    for i in range(n):
        r = idx[i]
        for j in range(m):
            out[r, j] += src[i, j]


def kmeans_assign(double[:, ::1] x, double[:, ::1] centroids):
    cdef Py_ssize_t n = x.shape[0], k = centroids.shape[0], d = x.shape[1]
    labels_arr = np.empty(n, dtype=np.int64)
    dist_arr = np.empty(n, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t i, j, c
    cdef double best, cur, diff
    for i in range(n):
        best = -1.0
        labels[i] = 0
        for c in range(k):
            cur = 0.0
            for j in range(d):
                diff = x[i, j] - centroids[c, j]
                cur += diff * diff
            if best < 0.0 or cur < best:
                best = cur
                labels[i] = c
        dist[i] = best
    return labels_arr, dist_arr


def adam_step(
    double[::1] p,
    double[::1] g,
    double[::1] m,
    double[::1] v,
    long long step,
    double lr,
    double beta1,
    double beta2,
    double eps,
    double weight_decay,
):
    cdef Py_ssize_t n = p.shape[0]
    cdef double bc1 = 1.0 - pow(beta1, <double> step)
    cdef double bc2 = 1.0 - pow(beta2, <double> step)
    cdef Py_ssize_t i
    cdef double gi
    for i in range(n):
        gi = g[i]
        if weight_decay != 0.0:
            gi += weight_decay * p[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi
        p[i] -= lr * (m[i] / bc1) / (sqrt(v[i] / bc2) + eps)
