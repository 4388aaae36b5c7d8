"""Pure-numpy implementations of the hot kernels.

This module and the compiled ``_kernels`` extension expose the same
function set; :mod:`topocast.backend` picks one at import time. All
arrays are float64 and C-contiguous.
"""

import numpy as np


def matmul_nn(a, b):
    return a @ b


def matmul_nt(a, b):
    """a @ b.T"""
    return a @ b.T


def matmul_tn(a, b):
    """a.T @ b"""
    return a.T @ b


def softmax_rows_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(y, dy):
    s = (dy * y).sum(axis=1, keepdims=True)
    return (dy - s) * y


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv[:, None]
    return xhat * gain + bias, xhat, inv


def layer_norm_bwd(xhat, inv, gain, dy):
    n = xhat.shape[1]
    dxh = dy * gain
    s1 = dxh.sum(axis=1, keepdims=True)
    s2 = (dxh * xhat).sum(axis=1, keepdims=True)
    dx = inv[:, None] * (dxh - s1 / n - xhat * s2 / n)
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    return dx, dgain, dbias


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, dy):
    return np.where(x > 0.0, dy, 0.0)


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_bwd(y, dy):
    return dy * y * (1.0 - y)


def softplus_fwd(x):
    # log(1 + exp(x)), overflow-safe on both tails
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_bwd(x, dy):
    return dy * sigmoid_fwd(x)


def conv3_fwd(emb, kernel):
    """Depthwise width-3 convolution over the row (token) axis, zero-padded."""
    out = emb * kernel[1]
    out[1:] += emb[:-1] * kernel[0]
    out[:-1] += emb[1:] * kernel[2]
    return out


def conv3_kernel_grad(emb, dy):
    """Gradient of conv3_fwd w.r.t. the kernel."""
    dk = np.empty((3, emb.shape[1]))
    dk[0] = (emb[:-1] * dy[1:]).sum(axis=0)
    dk[1] = (emb * dy).sum(axis=0)
    dk[2] = (emb[1:] * dy[:-1]).sum(axis=0)
    return dk


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    """One bias-corrected Adam step, applied in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
