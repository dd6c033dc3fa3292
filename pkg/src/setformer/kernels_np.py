"""NumPy implementations of the fused row kernels.

This is the fallback backend, used when the compiled extension is missing or
when ``SETFORMER_BACKEND=numpy``. The compiled module in ``_kernels.pyx``
mirrors these functions one for one; both obey the same accumulation
contract: reductions over float32 data accumulate in float64 and round once
at the end, so results do not depend on the order of the reduced elements.

Matrix products are deliberately absent from this surface. They go through
BLAS via numpy in every backend; a hand-rolled matmul would only lose.
"""

import numpy as np


def softmax_rows(x):
    """Row-wise softmax of a 2-d array, max-shifted for stability."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    denom = e.sum(axis=1, dtype=np.float64, keepdims=True)
    return (e / denom).astype(x.dtype, copy=False)


def softmax_rows_grad(y, g):
    """Input gradient of softmax_rows given its output y and upstream g."""
    dot = (y.astype(np.float64) * g).sum(axis=1, keepdims=True)
    return (y * (g - dot)).astype(y.dtype, copy=False)


def logsumexp_rows(x):
    """log(sum(exp(row))) per row, max-shifted; returns a 1-d array."""
    m = x.max(axis=1)
    s = np.exp(x - m[:, None]).sum(axis=1, dtype=np.float64)
    return (m + np.log(s)).astype(x.dtype, copy=False)


def layernorm_rows(x, gamma, beta, eps):
    """Normalize each row to mean 0 / variance 1 (biased), then affine.

    Returns (y, mean, rstd); mean and rstd are float64 so the backward pass
    can reuse them at full precision.
    """
    xd = x.astype(np.float64, copy=False)
    mean = xd.mean(axis=1, keepdims=True)
    var = np.square(xd - mean).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = ((xd - mean) * rstd * gamma + beta).astype(x.dtype)
    return y, mean[:, 0], rstd[:, 0]


def layernorm_rows_grad(x, gamma, mean, rstd, g):
    """Gradients of layernorm_rows: returns (dx, dgamma, dbeta)."""
    xd = x.astype(np.float64, copy=False)
    gd = g.astype(np.float64, copy=False)
    xhat = (xd - mean[:, None]) * rstd[:, None]
    dxhat = gd * gamma.astype(np.float64)
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (rstd[:, None] * (dxhat - m1 - xhat * m2)).astype(x.dtype)
    dgamma = (gd * xhat).sum(axis=0).astype(gamma.dtype)
    dbeta = gd.sum(axis=0).astype(gamma.dtype)
    return dx, dgamma, dbeta


def sigmoid_fwd(x):
    # Branch form: exp is only ever taken of a non-positive argument.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid_grad(y, g):
    return y * (1.0 - y) * g


def tanh_fwd(x):
    return np.tanh(x)


def tanh_grad(y, g):
    return (1.0 - y * y) * g


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_grad(x, g):
    # Slope at exactly 0 is defined as 0.
    return np.where(x > 0, g, np.zeros((), dtype=g.dtype))


def adam_update(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    """One fused Adam step, in place on p/m/v.

    bc1/bc2 are the bias-correction denominators 1-beta1**t and 1-beta2**t.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * np.square(g)
    p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
