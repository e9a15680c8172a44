# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused single-pass kernels (compiled twin of ``backend.reference``).

Same contracts as the reference module; the win over numpy comes from
fusing the reduction/normalization passes and avoiding temporaries on the
small matrices this package works with.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt, tanh, fabs

cnp.import_array()

NAME = "cython"

cdef double GELU_K = sqrt(2.0 / 3.14159265358979323846)
cdef double GELU_C = 0.044715


def softmax_rows_fwd(x):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xx = np.ascontiguousarray(x)
    cdef Py_ssize_t m = xx.shape[0], n = xx.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, n))
    cdef double mx, z, e
    for i in range(m):
        mx = xx[i, 0]
        for j in range(1, n):
            if xx[i, j] > mx:
                mx = xx[i, j]
        z = 0.0
        for j in range(n):
            e = exp(xx[i, j] - mx)
            out[i, j] = e
            z += e
        for j in range(n):
            out[i, j] /= z
    return out


def softmax_rows_bwd(p, g):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] pp = np.ascontiguousarray(p)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gg = np.ascontiguousarray(g)
    cdef Py_ssize_t m = pp.shape[0], n = pp.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, n))
    cdef double dot
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += gg[i, j] * pp[i, j]
        for j in range(n):
            out[i, j] = pp[i, j] * (gg[i, j] - dot)
    return out


def masked_softmax_fwd(x, w):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] xx = np.ascontiguousarray(x)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ww = np.ascontiguousarray(w)
    cdef Py_ssize_t H = xx.shape[0], m = xx.shape[1], n = xx.shape[2], h, i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=3] p = np.empty((H, m, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=3] q = np.empty((H, m, n))
    cdef double mx, z, e
    for h in range(H):
        for i in range(m):
            mx = xx[h, i, 0]
            for j in range(1, n):
                if xx[h, i, j] > mx:
                    mx = xx[h, i, j]
            z = 0.0
            for j in range(n):
                e = exp(xx[h, i, j] - mx)
                q[h, i, j] = e
                z += e * ww[j]
            for j in range(n):
                q[h, i, j] /= z
                p[h, i, j] = q[h, i, j] * ww[j]
    return p, q


def masked_softmax_bwd(p, q, w, g):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] pp = np.ascontiguousarray(p)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] qq = np.ascontiguousarray(q)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] gg = np.ascontiguousarray(g)
    cdef Py_ssize_t H = pp.shape[0], m = pp.shape[1], n = pp.shape[2], h, i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=3] gx = np.empty((H, m, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gw = np.zeros(n)
    cdef double s
    for h in range(H):
        for i in range(m):
            s = 0.0
            for j in range(n):
                s += gg[h, i, j] * pp[h, i, j]
            for j in range(n):
                gx[h, i, j] = pp[h, i, j] * (gg[h, i, j] - s)
                gw[j] += qq[h, i, j] * (gg[h, i, j] - s)
    return gx, gw


def layernorm_fwd(x, gamma, beta, double eps):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xx = np.ascontiguousarray(x)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ga = np.ascontiguousarray(gamma)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] be = np.ascontiguousarray(beta)
    cdef Py_ssize_t m = xx.shape[0], d = xx.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xhat = np.empty((m, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=2] rstd = np.empty((m, 1))
    cdef double mean, var, r, c
    for i in range(m):
        mean = 0.0
        for j in range(d):
            mean += xx[i, j]
        mean /= d
        var = 0.0
        for j in range(d):
            c = xx[i, j] - mean
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i, 0] = r
        for j in range(d):
            c = (xx[i, j] - mean) * r
            xhat[i, j] = c
            out[i, j] = c * ga[j] + be[j]
    return out, xhat, rstd


def layernorm_bwd(xhat, rstd, gamma, g):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] xh = np.ascontiguousarray(xhat)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] rs = np.ascontiguousarray(rstd)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ga = np.ascontiguousarray(gamma)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gg = np.ascontiguousarray(g)
    cdef Py_ssize_t m = xh.shape[0], d = xh.shape[1], i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=2] gx = np.empty((m, d))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ggamma = np.zeros(d)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gbeta = np.zeros(d)
    cdef double mg, mgx, gxh
    for i in range(m):
        mg = 0.0
        mgx = 0.0
        for j in range(d):
            gxh = gg[i, j] * ga[j]
            mg += gxh
            mgx += gxh * xh[i, j]
        mg /= d
        mgx /= d
        for j in range(d):
            gxh = gg[i, j] * ga[j]
            gx[i, j] = rs[i, 0] * (gxh - mg - xh[i, j] * mgx)
            ggamma[j] += gg[i, j] * xh[i, j]
            gbeta[j] += gg[i, j]
    return gx, ggamma, gbeta


cdef void _gelu_fwd_1d(double[::1] x, double[::1] out) noexcept:
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, inner
    for i in range(n):
        v = x[i]
        inner = GELU_K * (v + GELU_C * v * v * v)
        out[i] = 0.5 * v * (1.0 + tanh(inner))


def gelu_fwd(x):
    flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    out = np.empty_like(flat)
    _gelu_fwd_1d(flat, out)
    return out.reshape(x.shape)


def gelu_bwd(x, g):
    cdef double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double[::1] gf = np.ascontiguousarray(g, dtype=np.float64).ravel()
    out = np.empty(xf.shape[0])
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, t, dinner
    for i in range(n):
        v = xf[i]
        t = tanh(GELU_K * (v + GELU_C * v * v * v))
        dinner = GELU_K * (1.0 + 3.0 * GELU_C * v * v)
        of[i] = gf[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner)
    return out.reshape(x.shape)


def sigmoid_fwd(x):
    cdef double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    out = np.empty(xf.shape[0])
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, e
    for i in range(n):
        v = xf[i]
        if v >= 0:
            of[i] = 1.0 / (1.0 + exp(-v))
        else:
            e = exp(v)
            of[i] = e / (1.0 + e)
    return out.reshape(x.shape)


def sigmoid_bwd(y, g):
    cdef double[::1] yf = np.ascontiguousarray(y, dtype=np.float64).ravel()
    cdef double[::1] gf = np.ascontiguousarray(g, dtype=np.float64).ravel()
    out = np.empty(yf.shape[0])
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = yf.shape[0]
    for i in range(n):
        of[i] = gf[i] * yf[i] * (1.0 - yf[i])
    return out.reshape(y.shape)


def softplus_fwd(x):
    cdef double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    out = np.empty(xf.shape[0])
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v
    for i in range(n):
        v = xf[i]
        of[i] = (v if v > 0 else 0.0) + log1p(exp(-fabs(v)))
    return out.reshape(x.shape)


def softplus_bwd(x, g):
    cdef double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double[::1] gf = np.ascontiguousarray(g, dtype=np.float64).ravel()
    out = np.empty(xf.shape[0])
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v, e
    for i in range(n):
        v = xf[i]
        if v >= 0:
            of[i] = gf[i] / (1.0 + exp(-v))
        else:
            e = exp(v)
            of[i] = gf[i] * e / (1.0 + e)
    return out.reshape(x.shape)


def clamp01_fwd(x):
    cdef double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    out = np.empty(xf.shape[0])
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = xf.shape[0]
    cdef double v
    for i in range(n):
        v = xf[i]
        of[i] = 0.0 if v < 0.0 else (1.0 if v > 1.0 else v)
    return out.reshape(x.shape)


def clamp01_bwd(x, g):
    cdef double[::1] xf = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef double[::1] gf = np.ascontiguousarray(g, dtype=np.float64).ravel()
    out = np.empty(xf.shape[0])
    cdef double[::1] of = out
    cdef Py_ssize_t i, n = xf.shape[0]
    for i in range(n):
        of[i] = gf[i] if (xf[i] > 0.0 and xf[i] < 1.0) else 0.0
    return out.reshape(x.shape)


def cross_entropy_fwd(logits, Py_ssize_t label):
    cdef double[::1] lf = np.ascontiguousarray(logits, dtype=np.float64).ravel()
    cdef Py_ssize_t i, n = lf.shape[0]
    cdef double mx = lf[0], z = 0.0
    for i in range(1, n):
        if lf[i] > mx:
            mx = lf[i]
    p = np.empty(n)
    cdef double[::1] pf = p
    for i in range(n):
        pf[i] = exp(lf[i] - mx)
        z += pf[i]
    for i in range(n):
        pf[i] /= z
    return float(log(z) + mx - lf[label]), p


def cross_entropy_bwd(p, Py_ssize_t label, double g):
    gx = np.array(p, dtype=np.float64, copy=True)
    cdef double[::1] gf = gx
    gf[label] -= 1.0
    cdef Py_ssize_t i
    for i in range(gf.shape[0]):
        gf[i] *= g
    return gx


def score_aggregate_fwd(a, qw):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] aa = np.ascontiguousarray(a)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] wf = np.ascontiguousarray(qw)
    cdef Py_ssize_t H = aa.shape[0], m = aa.shape[1], n = aa.shape[2], h, i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=1] scores = np.zeros(n)
    cdef double wsum = 0.0, wi
    for i in range(m):
        wsum += wf[i]
    for h in range(H):
        for i in range(m):
            wi = wf[i]
            if wi != 0.0:
                for j in range(n):
                    scores[j] += wi * aa[h, i, j]
    cdef double denom = H * wsum
    for j in range(n):
        scores[j] /= denom
    return scores, wsum


def score_aggregate_bwd(a, qw, scores, double wsum, g):
    cdef cnp.ndarray[cnp.float64_t, ndim=3] aa = np.ascontiguousarray(a)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] wf = np.ascontiguousarray(qw)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sf = np.ascontiguousarray(scores)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gf = np.ascontiguousarray(g)
    cdef Py_ssize_t H = aa.shape[0], m = aa.shape[1], n = aa.shape[2], h, i, j
    cdef cnp.ndarray[cnp.float64_t, ndim=3] ga = np.empty((H, m, n))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gqw = np.zeros(m)
    cdef double denom = H * wsum, sg = 0.0, acc
    for j in range(n):
        sg += sf[j] * gf[j]
    for h in range(H):
        for i in range(m):
            for j in range(n):
                ga[h, i, j] = wf[i] * gf[j] / denom
    for i in range(m):
        acc = 0.0
        for h in range(H):
            for j in range(n):
                acc += aa[h, i, j] * gf[j]
        gqw[i] = acc / denom - sg / wsum
    return ga, gqw
