# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused single-pass kernels for the hot row operations.

Mirrors kernels_np function for function. Contract shared with the fallback:
float32 reductions accumulate in double and round once, so reduced results
do not depend on element order. Matrix products are not here; BLAS owns
those in both backends.
"""

import numpy as np

cimport cython
from libc.math cimport exp, fabs, log, sqrt, tanh

ctypedef fused real:
    float
    double


cdef inline object _empty_like2(real[:, ::1] x, Py_ssize_t n, Py_ssize_t d):
    if real is float:
        return np.empty((n, d), dtype=np.float32)
    else:
        return np.empty((n, d), dtype=np.float64)


cdef inline object _empty_like1(real[::1] x, Py_ssize_t n):
    if real is float:
        return np.empty(n, dtype=np.float32)
    else:
        return np.empty(n, dtype=np.float64)


def softmax_rows(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m, s, e
    out_arr = _empty_like2(x, n, d)
    cdef real[:, ::1] out = out_arr
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            e = exp(<double>x[i, j] - m)
            out[i, j] = <real>e
            s += e
        for j in range(d):
            out[i, j] = <real>(<double>out[i, j] / s)
    return out_arr


def softmax_rows_grad(real[:, ::1] y, real[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    cdef double dot
    out_arr = _empty_like2(y, n, d)
    cdef real[:, ::1] out = out_arr
    for i in range(n):
        dot = 0.0
        for j in range(d):
            dot += <double>y[i, j] * <double>g[i, j]
        for j in range(d):
            out[i, j] = <real>(<double>y[i, j] * (<double>g[i, j] - dot))
    return out_arr


def logsumexp_rows(real[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m, s
    out_arr = _empty_like1(x[0], n)
    cdef real[::1] out = out_arr
    for i in range(n):
        m = x[i, 0]
        for j in range(1, d):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(d):
            s += exp(<double>x[i, j] - m)
        out[i] = <real>(m + log(s))
    return out_arr


def layernorm_rows(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double mu, var, diff, rs
    out_arr = _empty_like2(x, n, d)
    mean_arr = np.empty(n, dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef real[:, ::1] out = out_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] rstd = rstd_arr
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += <double>x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            diff = <double>x[i, j] - mu
            var += diff * diff
        var /= d
        rs = 1.0 / sqrt(var + eps)
        mean[i] = mu
        rstd[i] = rs
        for j in range(d):
            out[i, j] = <real>((<double>x[i, j] - mu) * rs * <double>gamma[j]
                               + <double>beta[j])
    return out_arr, mean_arr, rstd_arr


def layernorm_rows_grad(real[:, ::1] x, real[::1] gamma, double[::1] mean,
                        double[::1] rstd, real[:, ::1] g):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    cdef double m1, m2, xhat, dxhat, gj
    dx_arr = _empty_like2(x, n, d)
    dgamma_acc = np.zeros(d, dtype=np.float64)
    dbeta_acc = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dga = dgamma_acc
    cdef double[::1] dbe = dbeta_acc
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (<double>x[i, j] - mean[i]) * rstd[i]
            dxhat = <double>g[i, j] * <double>gamma[j]
            m1 += dxhat
            m2 += dxhat * xhat
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (<double>x[i, j] - mean[i]) * rstd[i]
            dxhat = <double>g[i, j] * <double>gamma[j]
            gj = <double>g[i, j]
            dx[i, j] = <real>(rstd[i] * (dxhat - m1 - xhat * m2))
            dga[j] += gj * xhat
            dbe[j] += gj
    if real is float:
        return dx_arr, dgamma_acc.astype(np.float32), dbeta_acc.astype(np.float32)
    else:
        return dx_arr, dgamma_acc, dbeta_acc


def sigmoid_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    cdef double e
    out_arr = _empty_like1(x, n)
    cdef real[::1] out = out_arr
    for i in range(n):
        e = exp(-fabs(<double>x[i]))
        if x[i] >= 0:
            out[i] = <real>(1.0 / (1.0 + e))
        else:
            out[i] = <real>(e / (1.0 + e))
    return out_arr


def sigmoid_grad(real[::1] y, real[::1] g):
    cdef Py_ssize_t n = y.shape[0], i
    out_arr = _empty_like1(y, n)
    cdef real[::1] out = out_arr
    for i in range(n):
        out[i] = <real>(<double>y[i] * (1.0 - <double>y[i]) * <double>g[i])
    return out_arr


def tanh_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = _empty_like1(x, n)
    cdef real[::1] out = out_arr
    for i in range(n):
        out[i] = <real>tanh(<double>x[i])
    return out_arr


def tanh_grad(real[::1] y, real[::1] g):
    cdef Py_ssize_t n = y.shape[0], i
    out_arr = _empty_like1(y, n)
    cdef real[::1] out = out_arr
    for i in range(n):
        out[i] = <real>((1.0 - <double>y[i] * <double>y[i]) * <double>g[i])
    return out_arr


def relu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = _empty_like1(x, n)
    cdef real[::1] out = out_arr
    for i in range(n):
        out[i] = x[i] if x[i] > 0 else <real>0
    return out_arr


def relu_grad(real[::1] x, real[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = _empty_like1(x, n)
    cdef real[::1] out = out_arr
    for i in range(n):
        out[i] = g[i] if x[i] > 0 else <real>0
    return out_arr


def adam_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps,
                double bc1, double bc2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi, gi
    for i in range(n):
        gi = <double>g[i]
        mi = beta1 * <double>m[i] + (1.0 - beta1) * gi
        vi = beta2 * <double>v[i] + (1.0 - beta2) * gi * gi
        m[i] = <real>mi
        v[i] = <real>vi
        p[i] = <real>(<double>p[i] - (lr / bc1) * mi / (sqrt(vi / bc2) + eps))
