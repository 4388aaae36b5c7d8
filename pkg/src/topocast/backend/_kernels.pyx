# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled float64 kernels.

Same function set as :mod:`topocast.backend.numpy_kernels`. The loops are
tuned for the small dense matrices this package actually runs (tens to a
few hundred rows), where call overhead and BLAS dispatch dominate.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log1p, sqrt

cnp.import_array()


# Matrix products delegate to numpy: BLAS beats handwritten loops at every
# size this package runs (measured down to 7x16 operands).

def matmul_nn(a, b):
    return np.dot(a, b)


def matmul_nt(a, b):
    """a @ b.T"""
    return np.dot(a, b.T)


def matmul_tn(a, b):
    """a.T @ b"""
    return np.dot(a.T, b)


def softmax_rows_fwd(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] y = out
    cdef Py_ssize_t i, j
    cdef double mx, s
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            y[i, j] = exp(x[i, j] - mx)
            s += y[i, j]
        for j in range(n):
            y[i, j] /= s
    return out


def softmax_rows_bwd(double[:, ::1] y, double[:, ::1] dy):
    cdef Py_ssize_t m = y.shape[0], n = y.shape[1]
    out = np.empty((m, n))
    cdef double[:, ::1] dx = out
    cdef Py_ssize_t i, j
    cdef double s
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += dy[i, j] * y[i, j]
        for j in range(n):
            dx[i, j] = (dy[i, j] - s) * y[i, j]
    return out


def layer_norm_fwd(double[:, ::1] x, double[::1] gain, double[::1] bias,
                   double eps):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    out = np.empty((m, n))
    xhat_arr = np.empty((m, n))
    inv_arr = np.empty(m)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] inv = inv_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, d, s
    for i in range(m):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        var /= n
        s = 1.0 / sqrt(var + eps)
        inv[i] = s
        for j in range(n):
            xhat[i, j] = (x[i, j] - mu) * s
            y[i, j] = xhat[i, j] * gain[j] + bias[j]
    return out, xhat_arr, inv_arr


def layer_norm_bwd(double[:, ::1] xhat, double[::1] inv, double[::1] gain,
                   double[:, ::1] dy):
    cdef Py_ssize_t m = xhat.shape[0], n = xhat.shape[1]
    dx_arr = np.empty((m, n))
    dgain_arr = np.zeros(n)
    dbias_arr = np.zeros(n)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef Py_ssize_t i, j
    cdef double s1, s2, dxh
    for i in range(m):
        s1 = 0.0
        s2 = 0.0
        for j in range(n):
            dxh = dy[i, j] * gain[j]
            s1 += dxh
            s2 += dxh * xhat[i, j]
        for j in range(n):
            dxh = dy[i, j] * gain[j]
            dx[i, j] = inv[i] * (dxh - s1 / n - xhat[i, j] * s2 / n)
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
    return dx_arr, dgain_arr, dbias_arr


def relu_fwd(x):
    out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] yf = out.ravel()
    cdef Py_ssize_t i
    for i in range(xf.shape[0]):
        yf[i] = xf[i] if xf[i] > 0.0 else 0.0
    return out


def relu_bwd(x, dy):
    out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] df = dy.ravel()
    cdef double[::1] yf = out.ravel()
    cdef Py_ssize_t i
    for i in range(xf.shape[0]):
        yf[i] = df[i] if xf[i] > 0.0 else 0.0
    return out


cdef inline double _sigmoid(double v) noexcept:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + exp(-v))
    e = exp(v)
    return e / (1.0 + e)


def sigmoid_fwd(x):
    out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] yf = out.ravel()
    cdef Py_ssize_t i
    for i in range(xf.shape[0]):
        yf[i] = _sigmoid(xf[i])
    return out


def sigmoid_bwd(y, dy):
    out = np.empty_like(y)
    cdef double[::1] yf = y.ravel()
    cdef double[::1] df = dy.ravel()
    cdef double[::1] of = out.ravel()
    cdef Py_ssize_t i
    for i in range(yf.shape[0]):
        of[i] = df[i] * yf[i] * (1.0 - yf[i])
    return out


def softplus_fwd(x):
    out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] yf = out.ravel()
    cdef Py_ssize_t i
    cdef double v
    for i in range(xf.shape[0]):
        v = xf[i]
        if v > 0.0:
            yf[i] = v + log1p(exp(-v))
        else:
            yf[i] = log1p(exp(v))
    return out


def softplus_bwd(x, dy):
    out = np.empty_like(x)
    cdef double[::1] xf = x.ravel()
    cdef double[::1] df = dy.ravel()
    cdef double[::1] yf = out.ravel()
    cdef Py_ssize_t i
    for i in range(xf.shape[0]):
        yf[i] = df[i] * _sigmoid(xf[i])
    return out


def conv3_fwd(double[:, ::1] emb, double[:, ::1] kernel):
    """Depthwise width-3 convolution over the row (token) axis, zero-padded."""
    cdef Py_ssize_t n = emb.shape[0], d = emb.shape[1]
    out = np.empty((n, d))
    cdef double[:, ::1] y = out
    cdef Py_ssize_t t, j
    cdef double acc
    for t in range(n):
        for j in range(d):
            acc = kernel[1, j] * emb[t, j]
            if t > 0:
                acc += kernel[0, j] * emb[t - 1, j]
            if t < n - 1:
                acc += kernel[2, j] * emb[t + 1, j]
            y[t, j] = acc
    return out


def conv3_kernel_grad(double[:, ::1] emb, double[:, ::1] dy):
    """Gradient of conv3_fwd w.r.t. the kernel."""
    cdef Py_ssize_t n = emb.shape[0], d = emb.shape[1]
    out = np.zeros((3, d))
    cdef double[:, ::1] dk = out
    cdef Py_ssize_t t, j
    for t in range(n):
        for j in range(d):
            dk[1, j] += emb[t, j] * dy[t, j]
            if t > 0:
                dk[0, j] += emb[t - 1, j] * dy[t, j]
            if t < n - 1:
                dk[2, j] += emb[t + 1, j] * dy[t, j]
    return out


def adam_update(param, grad, m, v, double lr, double beta1, double beta2,
                double eps, int t):
    """One bias-corrected Adam step, applied in place."""
    cdef double[::1] pf = param.ravel()
    cdef double[::1] gf = grad.ravel()
    cdef double[::1] mf = m.ravel()
    cdef double[::1] vf = v.ravel()
    cdef double c1 = 1.0 - beta1**t
    cdef double c2 = 1.0 - beta2**t
    cdef Py_ssize_t i
    cdef double g, mh, vh
    for i in range(pf.shape[0]):
        g = gf[i]
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * g
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * g * g
        mh = mf[i] / c1
        vh = vf[i] / c2
        pf[i] -= lr * mh / (sqrt(vh) + eps)
