# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels matching the pure-numpy fallback bit-for-bit in
semantics (small float error aside): layer norm, masked attention
softmax, GELU, and softmax cross-entropy, each with its backward pass.

All functions accept C-contiguous float32 or float64 arrays and return
arrays of the same dtype. Reductions accumulate in double either way.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport INFINITY, exp, log, sqrt, tanh

ctypedef fused real:
    float
    double

cdef double _GELU_C = sqrt(2.0 / 3.141592653589793)
cdef double _GELU_A = 0.044715


cdef inline object _dtype_of(bint is_double):
    return np.float64 if is_double else np.float32


def layer_norm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n_rows = x.shape[0], width = x.shape[1]
    dtype = _dtype_of(real is double)
    y_arr = np.empty((n_rows, width), dtype=dtype)
    mean_arr = np.empty(n_rows, dtype=dtype)
    rstd_arr = np.empty(n_rows, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[::1] mean = mean_arr
    cdef real[::1] rstd = rstd_arr
    cdef Py_ssize_t r, j
    cdef double m, v, d, rs
    with nogil:
        for r in range(n_rows):
            m = 0.0
            for j in range(width):
                m += x[r, j]
            m /= width
            v = 0.0
            for j in range(width):
                d = x[r, j] - m
                v += d * d
            v /= width
            rs = 1.0 / sqrt(v + eps)
            mean[r] = <real> m
            rstd[r] = <real> rs
            for j in range(width):
                y[r, j] = <real> ((x[r, j] - m) * rs * gamma[j] + beta[j])
    return y_arr, mean_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] dy, real[:, ::1] x, real[::1] gamma,
                   real[::1] mean, real[::1] rstd):
    cdef Py_ssize_t n_rows = x.shape[0], width = x.shape[1]
    dtype = _dtype_of(real is double)
    dx_arr = np.empty((n_rows, width), dtype=dtype)
    dgamma_arr = np.zeros(width, dtype=np.float64)
    dbeta_arr = np.zeros(width, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dgamma = dgamma_arr
    cdef double[::1] dbeta = dbeta_arr
    cdef Py_ssize_t r, j
    cdef double xhat, dxhat, m1, m2, rs, mu
    with nogil:
        for r in range(n_rows):
            mu = mean[r]
            rs = rstd[r]
            m1 = 0.0
            m2 = 0.0
            for j in range(width):
                xhat = (x[r, j] - mu) * rs
                dxhat = dy[r, j] * gamma[j]
                m1 += dxhat
                m2 += dxhat * xhat
                dgamma[j] += dy[r, j] * xhat
                dbeta[j] += dy[r, j]
            m1 /= width
            m2 /= width
            for j in range(width):
                xhat = (x[r, j] - mu) * rs
                dxhat = dy[r, j] * gamma[j]
                dx[r, j] = <real> ((dxhat - m1 - xhat * m2) * rs)
    return dx_arr, dgamma_arr.astype(dtype), dbeta_arr.astype(dtype)


def attn_softmax_fwd(real[:, :, ::1] scores, real[:, ::1] key_mask,
                     bint causal, Py_ssize_t heads):
    cdef Py_ssize_t n_rows = scores.shape[0]
    cdef Py_ssize_t tq = scores.shape[1], tk = scores.shape[2]
    out = np.empty((n_rows, tq, tk), dtype=_dtype_of(real is double))
    cdef real[:, :, ::1] p = out
    cdef Py_ssize_t r, b, i, j, limit
    cdef double mx, s, denom
    with nogil:
        for r in range(n_rows):
            b = r // heads
            for i in range(tq):
                limit = i + 1 if causal else tk
                mx = -INFINITY
                for j in range(limit):
                    if key_mask[b, j] > 0 and scores[r, i, j] > mx:
                        mx = scores[r, i, j]
                if mx == -INFINITY:
                    for j in range(tk):
                        p[r, i, j] = 0
                    continue
                denom = 0.0
                for j in range(tk):
                    if j < limit and key_mask[b, j] > 0:
                        s = exp(scores[r, i, j] - mx)
                        p[r, i, j] = <real> s
                        denom += s
                    else:
                        p[r, i, j] = 0
                for j in range(limit):
                    if key_mask[b, j] > 0:
                        p[r, i, j] = <real> (p[r, i, j] / denom)
    return out


def attn_softmax_bwd(real[:, :, ::1] dprobs, real[:, :, ::1] probs):
    cdef Py_ssize_t n_rows = probs.shape[0]
    cdef Py_ssize_t tq = probs.shape[1], tk = probs.shape[2]
    out = np.empty((n_rows, tq, tk), dtype=_dtype_of(real is double))
    cdef real[:, :, ::1] ds = out
    cdef Py_ssize_t r, i, j
    cdef double inner
    with nogil:
        for r in range(n_rows):
            for i in range(tq):
                inner = 0.0
                for j in range(tk):
                    inner += dprobs[r, i, j] * probs[r, i, j]
                for j in range(tk):
                    ds[r, i, j] = <real> (probs[r, i, j] * (dprobs[r, i, j] - inner))
    return out


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty(n, dtype=_dtype_of(real is double))
    cdef real[::1] y = out
    cdef Py_ssize_t i
    cdef double v, u
    with nogil:
        for i in range(n):
            v = x[i]
            u = _GELU_C * (v + _GELU_A * v * v * v)
            y[i] = <real> (0.5 * v * (1.0 + tanh(u)))
    return out


def gelu_bwd(real[::1] dy, real[::1] x):
    cdef Py_ssize_t n = x.shape[0]
    out = np.empty(n, dtype=_dtype_of(real is double))
    cdef real[::1] dx = out
    cdef Py_ssize_t i
    cdef double v, v2, u, t, du
    with nogil:
        for i in range(n):
            v = x[i]
            v2 = v * v
            u = _GELU_C * (v + _GELU_A * v * v2)
            t = tanh(u)
            du = _GELU_C * (1.0 + 3.0 * _GELU_A * v2)
            dx[i] = <real> (dy[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du))
    return out


def softmax_xent_fwd(real[:, ::1] logits, cnp.int64_t[::1] targets):
    cdef Py_ssize_t n_rows = logits.shape[0], vocab = logits.shape[1]
    dtype = _dtype_of(real is double)
    losses_arr = np.empty(n_rows, dtype=dtype)
    probs_arr = np.empty((n_rows, vocab), dtype=dtype)
    cdef real[::1] losses = losses_arr
    cdef real[:, ::1] probs = probs_arr
    cdef Py_ssize_t r, j
    cdef double mx, z, e
    with nogil:
        for r in range(n_rows):
            mx = logits[r, 0]
            for j in range(1, vocab):
                if logits[r, j] > mx:
                    mx = logits[r, j]
            z = 0.0
            for j in range(vocab):
                e = exp(logits[r, j] - mx)
                probs[r, j] = <real> e
                z += e
            for j in range(vocab):
                probs[r, j] = <real> (probs[r, j] / z)
            losses[r] = <real> (log(z) + mx - logits[r, targets[r]])
    return losses_arr, probs_arr


def softmax_xent_bwd(real[:, ::1] probs, cnp.int64_t[::1] targets, real[::1] scales):
    cdef Py_ssize_t n_rows = probs.shape[0], vocab = probs.shape[1]
    out = np.empty((n_rows, vocab), dtype=_dtype_of(real is double))
    cdef real[:, ::1] d = out
    cdef Py_ssize_t r, j
    cdef double sc
    with nogil:
        for r in range(n_rows):
            sc = scales[r]
            for j in range(vocab):
                d[r, j] = <real> (probs[r, j] * sc)
            d[r, targets[r]] -= <real> sc
    return out
