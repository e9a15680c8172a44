"""Numpy reference implementations of the fused kernels.

Every function here has a signature-identical twin in ``_fused.pyx``; the
active implementation is chosen at import time (see ``backend.__init__``).
Matrix products are not part of this API on purpose: both backends route
them through BLAS via ``numpy.matmul``.

All arrays are C-contiguous float64. Forward kernels return the saved
context needed by their backward twin.
"""

import numpy as np

NAME = "python"


def softmax_rows_fwd(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    return e / z


def softmax_rows_bwd(p, g):
    dot = (g * p).sum(axis=-1, keepdims=True)
    return p * (g - dot)


def masked_softmax_fwd(x, w):
    """Row softmax over keys with per-key weights and row renormalization.

    x: [H, m, n] logits, w: [n] key weights in [0, 1].
    Returns (p, q) where p[h,i,j] = e[h,i,j]*w[j] / z[h,i] and q = e / z
    (q is the backward context; note p = q * w).
    """
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = (e * w).sum(axis=-1, keepdims=True)
    q = e / z
    return q * w, q


def masked_softmax_bwd(p, q, w, g):
    s = (g * p).sum(axis=-1, keepdims=True)
    gx = p * (g - s)
    gw = (q * (g - s)).sum(axis=(0, 1))
    return gx, gw


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    return xhat * gamma + beta, xhat, rstd


def layernorm_bwd(xhat, rstd, gamma, g):
    d = xhat.shape[-1]
    gxhat = g * gamma
    mean_g = gxhat.mean(axis=-1, keepdims=True)
    mean_gx = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = rstd * (gxhat - mean_g - xhat * mean_gx)
    axes = tuple(range(xhat.ndim - 1))
    ggamma = (g * xhat).sum(axis=axes)
    gbeta = g.sum(axis=axes)
    del d
    return gx, ggamma, gbeta


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu_fwd(x):
    inner = _GELU_K * (x + _GELU_C * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_bwd(x, g):
    inner = _GELU_K * (x + _GELU_C * x**3)
    t = np.tanh(inner)
    dinner = _GELU_K * (1.0 + 3.0 * _GELU_C * x * x)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def sigmoid_fwd(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_bwd(y, g):
    return g * y * (1.0 - y)


def softplus_fwd(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_bwd(x, g):
    return g * sigmoid_fwd(x)


def clamp01_fwd(x):
    return np.clip(x, 0.0, 1.0)


def clamp01_bwd(x, g):
    return g * ((x > 0.0) & (x < 1.0))


def cross_entropy_fwd(logits, label):
    m = logits.max()
    e = np.exp(logits - m)
    z = e.sum()
    p = e / z
    loss = np.log(z) + m - logits[label]
    return float(loss), p


def cross_entropy_bwd(p, label, g):
    gx = p.copy()
    gx[label] -= 1.0
    return gx * g


def score_aggregate_fwd(a, qw):
    """Attention received per key: weighted mean over heads and query rows.

    a: [H, m, n] attention, qw: [m] query weights. Returns (scores[n], wsum).
    """
    wsum = float(qw.sum())
    scores = np.einsum("hmn,m->n", a, qw) / (a.shape[0] * wsum)
    return scores, wsum


def score_aggregate_bwd(a, qw, scores, wsum, g):
    h = a.shape[0]
    ga = np.broadcast_to(qw[None, :, None] * (g[None, None, :] / (h * wsum)), a.shape).copy()
    gqw = (a.sum(axis=0) @ g) / (h * wsum) - float(scores @ g) / wsum
    return ga, gqw
