# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Cython implementations of the hot kernels; same API as `_numpy`."""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, log, sqrt

cnp.import_array()

NAME = "cython"

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def gelu_fwd(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] xv = arr.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = xv[i] * 0.5 * (1.0 + erf(xv[i] * INV_SQRT2))
    return out


def gelu_bwd(x, gy):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    grad = np.ascontiguousarray(gy, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[::1] xv = arr.reshape(-1)
    cdef double[::1] gv = grad.reshape(-1)
    cdef double[::1] ov = out.reshape(-1)
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double phi, pdf
    with nogil:
        for i in range(n):
            phi = 0.5 * (1.0 + erf(xv[i] * INV_SQRT2))
            pdf = INV_SQRT2PI * exp(-0.5 * xv[i] * xv[i])
            ov[i] = gv[i] * (phi + xv[i] * pdf)
    return out


def softmax2d_fwd(x):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(arr)
    cdef double[:, ::1] xv = arr
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, n = xv.shape[0], d = xv.shape[1]
    cdef double m, z
    with nogil:
        for i in range(n):
            m = xv[i, 0]
            for j in range(1, d):
                if xv[i, j] > m:
                    m = xv[i, j]
            z = 0.0
            for j in range(d):
                ov[i, j] = exp(xv[i, j] - m)
                z += ov[i, j]
            for j in range(d):
                ov[i, j] /= z
    return out


def softmax2d_bwd(y, gy):
    yc = np.ascontiguousarray(y, dtype=np.float64)
    gc = np.ascontiguousarray(gy, dtype=np.float64)
    out = np.empty_like(yc)
    cdef double[:, ::1] yv = yc
    cdef double[:, ::1] gv = gc
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, n = yv.shape[0], d = yv.shape[1]
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += gv[i, j] * yv[i, j]
            for j in range(d):
                ov[i, j] = yv[i, j] * (gv[i, j] - dot)
    return out


def layernorm2d_fwd(x, gain, bias, double eps):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    gn = np.ascontiguousarray(gain, dtype=np.float64)
    bs = np.ascontiguousarray(bias, dtype=np.float64)
    cdef Py_ssize_t n = arr.shape[0], d = arr.shape[1]
    out = np.empty_like(arr)
    mean = np.empty(n)
    rstd = np.empty(n)
    cdef double[:, ::1] xv = arr
    cdef double[:, ::1] ov = out
    cdef double[::1] gv = gn
    cdef double[::1] bv = bs
    cdef double[::1] mv = mean
    cdef double[::1] rv = rstd
    cdef Py_ssize_t i, j
    cdef double mu, var, diff
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += xv[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                diff = xv[i, j] - mu
                var += diff * diff
            var /= d
            mv[i] = mu
            rv[i] = 1.0 / sqrt(var + eps)
            for j in range(d):
                ov[i, j] = (xv[i, j] - mu) * rv[i] * gv[j] + bv[j]
    return out, mean, rstd


def layernorm2d_bwd(x, gain, mean, rstd, gy):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    gn = np.ascontiguousarray(gain, dtype=np.float64)
    mn = np.ascontiguousarray(mean, dtype=np.float64)
    rs = np.ascontiguousarray(rstd, dtype=np.float64)
    gc = np.ascontiguousarray(gy, dtype=np.float64)
    cdef Py_ssize_t n = arr.shape[0], d = arr.shape[1]
    gx = np.empty_like(arr)
    dgain = np.zeros(d)
    dbias = np.zeros(d)
    cdef double[:, ::1] xv = arr
    cdef double[:, ::1] gv = gc
    cdef double[:, ::1] ov = gx
    cdef double[::1] gainv = gn
    cdef double[::1] mv = mn
    cdef double[::1] rv = rs
    cdef double[::1] dgv = dgain
    cdef double[::1] dbv = dbias
    cdef Py_ssize_t i, j
    cdef double xhat, g, gmean, gxhat
    with nogil:
        for i in range(n):
            gmean = 0.0
            gxhat = 0.0
            for j in range(d):
                xhat = (xv[i, j] - mv[i]) * rv[i]
                g = gv[i, j] * gainv[j]
                gmean += g
                gxhat += g * xhat
                dbv[j] += gv[i, j]
                dgv[j] += gv[i, j] * xhat
            gmean /= d
            gxhat /= d
            for j in range(d):
                xhat = (xv[i, j] - mv[i]) * rv[i]
                g = gv[i, j] * gainv[j]
                ov[i, j] = rv[i] * (g - gmean - xhat * gxhat)
    return gx, dgain, dbias


def cross_entropy2d_fwd(logits, labels):
    arr = np.ascontiguousarray(logits, dtype=np.float64)
    lab = np.ascontiguousarray(labels, dtype=np.intp)
    cdef Py_ssize_t n = arr.shape[0], k = arr.shape[1]
    probs = np.empty_like(arr)
    cdef double[:, ::1] xv = arr
    cdef double[:, ::1] pv = probs
    cdef cnp.intp_t[::1] lv = lab
    cdef Py_ssize_t i, j
    cdef double m, z, total = 0.0
    with nogil:
        for i in range(n):
            m = xv[i, 0]
            for j in range(1, k):
                if xv[i, j] > m:
                    m = xv[i, j]
            z = 0.0
            for j in range(k):
                pv[i, j] = exp(xv[i, j] - m)
                z += pv[i, j]
            total += log(z) - (xv[i, lv[i]] - m)
            for j in range(k):
                pv[i, j] /= z
    return total / n, probs


def cross_entropy2d_bwd(probs, labels, double gy):
    pc = np.ascontiguousarray(probs, dtype=np.float64)
    lab = np.ascontiguousarray(labels, dtype=np.intp)
    out = pc.copy()
    cdef Py_ssize_t n = pc.shape[0], k = pc.shape[1]
    cdef double[:, ::1] ov = out
    cdef cnp.intp_t[::1] lv = lab
    cdef double scale = gy / n
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            ov[i, lv[i]] -= 1.0
            for j in range(k):
                ov[i, j] *= scale
    return out


def adamw_step(p, g, m, v, double lr, double beta1, double beta2,
               double eps, double wd, long t):
    cdef double[::1] pv = p
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef double[::1] mv = m
    cdef double[::1] vv = v
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double bc1 = 1.0 - beta1 ** t
    cdef double bc2 = 1.0 - beta2 ** t
    cdef double mhat, vhat
    with nogil:
        for i in range(n):
            mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i]
            vv[i] = beta2 * vv[i] + (1.0 - beta2) * gv[i] * gv[i]
            mhat = mv[i] / bc1
            vhat = vv[i] / bc2
            pv[i] -= lr * (mhat / (sqrt(vhat) + eps) + wd * pv[i])


def sgd_step(p, g, double lr, double wd):
    cdef double[::1] pv = p
    cdef double[::1] gv = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t i, n = pv.shape[0]
    with nogil:
        for i in range(n):
            pv[i] -= lr * (gv[i] + wd * pv[i])
