"""Shared oracles: finite differences, brute-force DCG, tiny fixtures."""

from __future__ import annotations

import math

import numpy as np

from tokenprune.tensor import Tensor


def finite_diff_grads(f, params, h: float = 1e-6):
    """Central finite differences of the scalar ``f()`` w.r.t. each parameter.

    ``f`` must be a pure function of the current ``p.data`` contents.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor: float = 1e-4) -> float:
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradcheck(build_loss, params, h: float = 1e-6, tol: float = 1e-4) -> float:
    """Analytic grads of ``build_loss()`` (fresh tape per call) vs central FD."""
    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = finite_diff_grads(lambda: build_loss().item(), params, h=h)
    err = max_rel_error(analytic, numeric)
    assert err <= tol, f"gradient mismatch: max relative error {err:.3e} > {tol}"
    return err


def brute_force_best_dcg(grades) -> float:
    """Max DCG over all permutations (factorial; keep lists tiny)."""
    import itertools

    best = -math.inf
    for perm in itertools.permutations(grades):
        val = sum((2.0**g - 1.0) / math.log2(pos + 1.0) for pos, g in enumerate(perm, start=1))
        best = max(best, val)
    return best


def dcg_of_order(grades, order) -> float:
    return sum(
        (2.0 ** grades[tok] - 1.0) / math.log2(pos + 1.0) for pos, tok in enumerate(order, start=1)
    )


def rand_tensor(rng: np.random.Generator, shape, requires_grad=True, scale=1.0) -> Tensor:
    return Tensor(rng.normal(size=shape) * scale, requires_grad=requires_grad)
