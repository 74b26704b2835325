"""NumPy implementations of the hot kernels.

This is the fallback backend; `vpl._kernels._core` (Cython) implements the
same signatures. Everything is float64 and C-contiguous. 2d kernels reduce
over axis 1 (one row = one normalization/softmax group).
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327

NAME = "numpy"


def gelu_fwd(x):
    """Exact GELU x * Phi(x)."""
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def gelu_bwd(x, gy):
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return gy * (phi + x * pdf)


def softmax2d_fwd(x):
    """Row-wise stable softmax, x (n, d)."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax2d_bwd(y, gy):
    """gx = y * (gy - sum(gy * y)) per row."""
    dot = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - dot)


def layernorm2d_fwd(x, gain, bias, eps):
    """Row-wise layer norm with affine. Returns (y, mean, rstd)."""
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def layernorm2d_bwd(x, gain, mean, rstd, gy):
    """Returns (gx, dgain, dbias) for the forward above."""
    d = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    dbias = gy.sum(axis=0)
    dgain = (gy * xhat).sum(axis=0)
    g = gy * gain
    gmean = g.mean(axis=1, keepdims=True)
    gxhat = (g * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (g - gmean - xhat * gxhat)
    return gx, dgain, dbias


def cross_entropy2d_fwd(logits, labels):
    """Mean NLL of logits (n, k) at integer labels (n,). Returns (loss, probs)."""
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1)
    probs = e / z[:, None]
    nll = np.log(z) - shifted[np.arange(n), labels]
    return float(nll.mean()), probs


def cross_entropy2d_bwd(probs, labels, gy):
    """dlogits = gy * (probs - onehot) / n."""
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    g *= gy / n
    return g


def adamw_step(p, g, m, v, lr, beta1, beta2, eps, wd, t):
    """Decoupled-weight-decay Adam update, in place on flat arrays."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * p)


def sgd_step(p, g, lr, wd):
    """Plain SGD with L2 decay, in place on flat arrays."""
    p -= lr * (g + wd * p)
