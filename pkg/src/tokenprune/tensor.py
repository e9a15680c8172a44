"""Dense float64 tensors with tape-based reverse-mode differentiation.

The graph is recorded dynamically: every operation stores its parents and a
closure that scatters the output gradient back to them. ``backward`` on a
scalar walks the tape once in reverse topological order and frees nothing;
callers drop their references after an optimization step, which releases the
graph. Repeated ``backward`` calls accumulate into ``grad`` until the caller
zeroes it.

Matrix products run through BLAS (``numpy.matmul``); the fused elementwise /
normalization kernels are dispatched through :mod:`tokenprune.backend` so the
compiled core and the reference implementation are interchangeable.

Broadcasting is intentionally narrow: operands must have equal shapes, or one
side must be a scalar. Row scaling has its own operation. Nothing else is
needed by the encoder and keeping the rules small keeps the gradients obvious.
"""

from __future__ import annotations

import numpy as np

from . import backend
from .errors import InputError, NumericError, ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g) -> None:
        if self.grad is None:
            # copy: callers may pass views or buffers they still own
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor that requires it.

        Each call adds one full gradient of this loss; grads accumulate
        across calls until the caller zeroes them.
        """
        if self.data.shape != ():
            raise InputError("backward requires a scalar loss")
        if not self.requires_grad:
            return
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        # Propagate this call's gradient in isolation, then fold previously
        # accumulated grads back in so repeated calls add up.
        stash = [(node, node.grad) for node in topo if node.grad is not None]
        for node, _ in stash:
            node.grad = None
        self._accumulate(np.ones(()))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
        for node, prev in stash:
            if node.grad is None:
                node.grad = prev
            else:
                node.grad += prev

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (only scalar broadcasting is allowed)."""
    if shape == ():
        return np.sum(g)
    return g


def _check_same_or_scalar(a, b, op):
    if a.data.shape != b.data.shape and a.data.shape != () and b.data.shape != ():
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = _bwd if out.requires_grad else None
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "mul")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = _bwd if out.requires_grad else None
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_or_scalar(a, b, "div")
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    out._backward = _bwd if out.requires_grad else None
    return out


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (2, 3) or a.data.ndim != b.data.ndim:
        raise ShapeError(f"matmul: unsupported ranks {a.data.ndim} and {b.data.ndim}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree {a.data.shape} x {b.data.shape}")
    if a.data.ndim == 3 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError("matmul: batch dimensions disagree")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    out._backward = _bwd if out.requires_grad else None
    return out


def transpose_last2(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.swapaxes(x.data, -1, -2).copy(), x.requires_grad, (x,))

    def _bwd(g):
        x._accumulate(np.swapaxes(g, -1, -2))

    out._backward = _bwd if out.requires_grad else None
    return out


def split_heads(x, num_heads: int) -> Tensor:
    """[n, d] -> [H, n, d/H] by slicing the feature axis into head blocks."""
    x = _as_tensor(x)
    n, d = x.data.shape
    if d % num_heads:
        raise ShapeError(f"split_heads: {d} not divisible by {num_heads}")
    dh = d // num_heads
    out_data = np.ascontiguousarray(x.data.reshape(n, num_heads, dh).transpose(1, 0, 2))
    out = Tensor(out_data, x.requires_grad, (x,))

    def _bwd(g):
        x._accumulate(g.transpose(1, 0, 2).reshape(n, d))

    out._backward = _bwd if out.requires_grad else None
    return out


def merge_heads(x) -> Tensor:
    """[H, n, dh] -> [n, H*dh]; inverse of split_heads."""
    x = _as_tensor(x)
    h, n, dh = x.data.shape
    out = Tensor(np.ascontiguousarray(x.data.transpose(1, 0, 2).reshape(n, h * dh)), x.requires_grad, (x,))

    def _bwd(g):
        x._accumulate(g.reshape(n, h, dh).transpose(1, 0, 2))

    out._backward = _bwd if out.requires_grad else None
    return out


def softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN input")
    p = backend.impl.softmax_rows_fwd(x.data)
    out = Tensor(p, x.requires_grad, (x,))

    def _bwd(g):
        x._accumulate(backend.impl.softmax_rows_bwd(p, g))

    out._backward = _bwd if out.requires_grad else None
    return out


def masked_softmax(logits, key_weights) -> Tensor:
    """Row-stochastic attention over weighted keys.

    logits: [H, m, n]; key_weights: [n] in [0, 1]. Key j's probability is
    proportional to exp(logit) * w_j, so w_j = 0 removes the key exactly and
    the row renormalizes over the remaining mass.
    """
    logits, w = _as_tensor(logits), _as_tensor(key_weights)
    p, q = backend.impl.masked_softmax_fwd(logits.data, w.data)
    out = Tensor(p, logits.requires_grad or w.requires_grad, (logits, w))

    def _bwd(g):
        gx, gw = backend.impl.masked_softmax_bwd(p, q, w.data, g)
        if logits.requires_grad:
            logits._accumulate(gx)
        if w.requires_grad:
            w._accumulate(gw)

    out._backward = _bwd if out.requires_grad else None
    return out


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.shape[-1] != gamma.data.shape[0] or gamma.data.shape != beta.data.shape:
        raise ShapeError("layer_norm: parameter length must match the last axis")
    if eps <= 0:
        raise InputError("layer_norm: eps must be positive")
    squeeze = x.data.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    y, xhat, rstd = backend.impl.layernorm_fwd(xd, gamma.data, beta.data, eps)
    out = Tensor(y[0] if squeeze else y, x.requires_grad or gamma.requires_grad or beta.requires_grad, (x, gamma, beta))

    def _bwd(g):
        gd = g[None, :] if squeeze else g
        gx, ggamma, gbeta = backend.impl.layernorm_bwd(xhat, rstd, gamma.data, gd)
        if x.requires_grad:
            x._accumulate(gx[0] if squeeze else gx)
        if gamma.requires_grad:
            gamma._accumulate(ggamma)
        if beta.requires_grad:
            beta._accumulate(gbeta)

    out._backward = _bwd if out.requires_grad else None
    return out


def _elementwise(x, fwd, bwd, save_output=False):
    x = _as_tensor(x)
    y = fwd(x.data)
    out = Tensor(y, x.requires_grad, (x,))
    ctx = y if save_output else x.data

    def _bwd(g):
        x._accumulate(bwd(ctx, g))

    out._backward = _bwd if out.requires_grad else None
    return out


def gelu(x) -> Tensor:
    """Tanh-approximation GELU, fixed across every model in the package."""
    return _elementwise(x, lambda d: backend.impl.gelu_fwd(d), lambda c, g: backend.impl.gelu_bwd(c, g))


def sigmoid(x) -> Tensor:
    return _elementwise(
        x,
        lambda d: backend.impl.sigmoid_fwd(d),
        lambda c, g: backend.impl.sigmoid_bwd(c, g),
        save_output=True,
    )


def softplus(x) -> Tensor:
    return _elementwise(x, lambda d: backend.impl.softplus_fwd(d), lambda c, g: backend.impl.softplus_bwd(c, g))


def clamp01(x) -> Tensor:
    """Clamp to [0, 1]; gradient passes only through the open interior."""
    return _elementwise(x, lambda d: backend.impl.clamp01_fwd(d), lambda c, g: backend.impl.clamp01_bwd(c, g))


def scale_rows(x, w) -> Tensor:
    """Multiply row i of x[m, d] by w[i]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 2 or w.data.shape != (x.data.shape[0],):
        raise ShapeError(f"scale_rows: got {x.data.shape} and {w.data.shape}")
    out = Tensor(x.data * w.data[:, None], x.requires_grad or w.requires_grad, (x, w))

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * w.data[:, None])
        if w.requires_grad:
            w._accumulate((g * x.data).sum(axis=1))

    out._backward = _bwd if out.requires_grad else None
    return out


def tsum(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data), x.requires_grad, (x,))

    def _bwd(g):
        x._accumulate(np.full(x.data.shape, g))

    out._backward = _bwd if out.requires_grad else None
    return out


def tmean(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.mean(x.data), x.requires_grad, (x,))

    def _bwd(g):
        x._accumulate(np.full(x.data.shape, g / x.data.size))

    out._backward = _bwd if out.requires_grad else None
    return out


def dot(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape or a.data.ndim != 1:
        raise ShapeError("dot: expects equal-length vectors")
    out = Tensor(np.dot(a.data, b.data), a.requires_grad or b.requires_grad, (a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    out._backward = _bwd if out.requires_grad else None
    return out


def weighted_sum(x, weights) -> Tensor:
    """Dot with a constant weight vector (weights never receive gradient)."""
    x = _as_tensor(x)
    w = np.asarray(weights, dtype=np.float64)
    if x.data.shape != w.shape:
        raise ShapeError("weighted_sum: weight shape mismatch")
    out = Tensor(np.dot(x.data, w), x.requires_grad, (x,))

    def _bwd(g):
        x._accumulate(g * w)

    out._backward = _bwd if out.requires_grad else None
    return out


def gather_rows(x, indices) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 2:
        raise ShapeError("gather_rows: expects a matrix")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise InputError("gather_rows: index out of range")
    out = Tensor(x.data[idx], x.requires_grad, (x,))

    def _bwd(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g)
        x._accumulate(acc)

    out._backward = _bwd if out.requires_grad else None
    return out


def gather1d(x, indices) -> Tensor:
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if x.data.ndim != 1:
        raise ShapeError("gather1d: expects a vector")
    if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
        raise InputError("gather1d: index out of range")
    out = Tensor(x.data[idx], x.requires_grad, (x,))

    def _bwd(g):
        acc = np.zeros_like(x.data)
        np.add.at(acc, idx, g)
        x._accumulate(acc)

    out._backward = _bwd if out.requires_grad else None
    return out


def stack(scalars) -> Tensor:
    """Pack scalar tensors into a vector."""
    parts = [_as_tensor(s) for s in scalars]
    for p in parts:
        if p.data.shape != ():
            raise ShapeError("stack: expects scalars")
    out = Tensor(
        np.array([p.data for p in parts]),
        any(p.requires_grad for p in parts),
        tuple(parts),
    )

    def _bwd(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                p._accumulate(g[i])

    out._backward = _bwd if out.requires_grad else None
    return out


def concat(tensors) -> Tensor:
    """Concatenate along axis 0."""
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise InputError("concat: needs at least one tensor")
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=0),
        any(p.requires_grad for p in parts),
        tuple(parts),
    )
    sizes = [p.data.shape[0] for p in parts]

    def _bwd(g):
        off = 0
        for p, s in zip(parts, sizes):
            if p.requires_grad:
                p._accumulate(g[off : off + s])
            off += s

    out._backward = _bwd if out.requires_grad else None
    return out


def squeeze0(x) -> Tensor:
    """[1, n] -> [n]."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[0] != 1:
        raise ShapeError("squeeze0: expects a single-row matrix")
    out = Tensor(x.data[0], x.requires_grad, (x,))

    def _bwd(g):
        x._accumulate(g[None, :])

    out._backward = _bwd if out.requires_grad else None
    return out


def cross_entropy(logits, label: int) -> Tensor:
    """Log-sum-exp stabilized cross-entropy of a logit vector vs a class id."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError("cross_entropy: expects a logit vector")
    if not 0 <= int(label) < logits.data.shape[0]:
        raise InputError(f"cross_entropy: label {label} out of range")
    loss, p = backend.impl.cross_entropy_fwd(logits.data, int(label))
    out = Tensor(loss, logits.requires_grad, (logits,))

    def _bwd(g):
        logits._accumulate(backend.impl.cross_entropy_bwd(p, int(label), float(g)))

    out._backward = _bwd if out.requires_grad else None
    return out


def score_aggregate(attn, query_weights) -> Tensor:
    """Weighted received-attention scores: s_k = sum_h sum_q w_q A[h,q,k] / (H * sum w)."""
    a, qw = _as_tensor(attn), _as_tensor(query_weights)
    if a.data.ndim != 3 or qw.data.shape != (a.data.shape[1],):
        raise ShapeError("score_aggregate: expects [H, m, n] attention and [m] weights")
    if qw.data.sum() <= 0:
        raise InputError("score_aggregate: no valid query tokens")
    scores, wsum = backend.impl.score_aggregate_fwd(a.data, qw.data)
    out = Tensor(scores, a.requires_grad or qw.requires_grad, (a, qw))

    def _bwd(g):
        ga, gqw = backend.impl.score_aggregate_bwd(a.data, qw.data, scores, wsum, g)
        if a.requires_grad:
            a._accumulate(ga)
        if qw.requires_grad:
            qw._accumulate(gqw)

    out._backward = _bwd if out.requires_grad else None
    return out
