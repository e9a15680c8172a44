"""Hard concrete gate and ranking-position masks.

Sampling follows the stretched binary-concrete construction: with u uniform
in (0, 1), s = sigmoid((logit(u) + log_alpha) / beta) is stretched to
(l, r) = (-0.1, 1.1) and clamped to [0, 1], which puts finite probability
mass exactly on 0 and 1 while staying differentiable in log_alpha through
the interior.

Two tiers: one gate per layer (does this layer prune at all) and one mask
per ranking position per layer (is the j-th ranked token kept). Gates start
biased closed, ranking masks biased open. Ranking position 1 is structurally
pinned to keep so the classification token always survives; the position-1
parameters exist but are inert everywhere (sampling, expectations, plans).
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import InputError
from .tensor import Tensor

STRETCH_L = -0.1
STRETCH_R = 1.1
BETA = 2.0 / 3.0

GATE_INIT_LOG_ALPHA = -2.5
RANK_INIT_LOG_ALPHA = 2.5
# rank masks start open with a small monotone taper across rank positions:
# all positions binarize to keep at init, but later positions sit slightly
# lower so constraint pressure closes the tail of the ranking first instead
# of dragging every position to the same fractional value
RANK_INIT_SPREAD = 2.0

# sigmoid(log_alpha + ACTIVE_SHIFT) = P(mask > 0)
ACTIVE_SHIFT = -BETA * math.log(-STRETCH_L / STRETCH_R)


def _check_u(u):
    u = np.asarray(u, dtype=np.float64)
    if np.any(u <= 0.0) or np.any(u >= 1.0):
        raise InputError("hard concrete noise must lie in the open interval (0, 1)")
    return u


def sample_mask(log_alpha, u):
    """Stretched-and-clamped concrete sample; differentiable in log_alpha.

    ``log_alpha`` may be a float or a (scalar or vector) Tensor; ``u`` is a
    float or array of matching shape.
    """
    u = _check_u(u)
    noise = np.log(u) - np.log1p(-u)
    if isinstance(log_alpha, Tensor):
        s = T.sigmoid(T.mul(T.add(log_alpha, Tensor(noise)), 1.0 / BETA))
        return T.clamp01(T.add(T.mul(s, STRETCH_R - STRETCH_L), STRETCH_L))
    s = 1.0 / (1.0 + np.exp(-(noise + log_alpha) / BETA))
    out = np.clip(s * (STRETCH_R - STRETCH_L) + STRETCH_L, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def deterministic_mask(log_alpha):
    """Test-time value: the sample at u = 0.5 (zero logistic noise)."""
    la = log_alpha.item() if isinstance(log_alpha, Tensor) else float(log_alpha)
    s = 1.0 / (1.0 + math.exp(-la / BETA))
    return min(1.0, max(0.0, s * (STRETCH_R - STRETCH_L) + STRETCH_L))


def binarize(value: float) -> bool:
    """Keep/prune decision from a deterministic mask value; ties keep."""
    return bool(value >= 0.5)


def active_prob(log_alpha):
    """P(mask > 0) = sigmoid(log_alpha - beta * log(-l / r))."""
    if isinstance(log_alpha, Tensor):
        return T.sigmoid(T.add(log_alpha, ACTIVE_SHIFT))
    return 1.0 / (1.0 + math.exp(-(float(log_alpha) + ACTIVE_SHIFT)))


def effective_keep(gate_val, rank_val):
    """Combine the tiers: keep = 1 - gate * (1 - rank).

    A closed gate (0) retains the token regardless of rank; a fully open
    gate (1) delegates to the ranking mask. Works on floats and Tensors.
    """
    return 1.0 - gate_val * (1.0 - rank_val)


class MaskSet:
    """Learnable log_alpha parameters: L gates and L x n_max rank masks."""

    def __init__(self, num_layers: int, n_max: int, gate_log_alpha=None, rank_log_alpha=None):
        self.num_layers = num_layers
        self.n_max = n_max
        if gate_log_alpha is None:
            gate_log_alpha = [GATE_INIT_LOG_ALPHA] * num_layers
        if rank_log_alpha is None:
            taper = RANK_INIT_SPREAD / n_max
            rank_log_alpha = [
                RANK_INIT_LOG_ALPHA - taper * np.arange(n_max, dtype=np.float64)
                for _ in range(num_layers)
            ]
        self.gate = [Tensor(np.array(g, dtype=np.float64), requires_grad=True) for g in gate_log_alpha]
        self.rank = [Tensor(np.array(r, dtype=np.float64), requires_grad=True) for r in rank_log_alpha]
        for g in self.gate:
            if g.data.shape != ():
                raise InputError("gate log_alpha must be scalar")
        for r in self.rank:
            if r.data.shape != (n_max,):
                raise InputError(f"rank log_alpha must have shape ({n_max},)")

    def parameters(self) -> list[Tensor]:
        return list(self.gate) + list(self.rank)

    def named(self):
        for i, g in enumerate(self.gate):
            yield f"gate.{i}", g
        for i, r in enumerate(self.rank):
            yield f"rank.{i}", r

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named()}

    def deterministic_values(self):
        """(gate values [L], rank values [L][n_max]) at the test-time rule."""
        gates = [deterministic_mask(g) for g in self.gate]
        ranks = [np.array([deterministic_mask(v) for v in r.data]) for r in self.rank]
        return gates, ranks

    def copy(self) -> "MaskSet":
        return MaskSet(
            self.num_layers,
            self.n_max,
            [g.data.copy() for g in self.gate],
            [r.data.copy() for r in self.rank],
        )

    @classmethod
    def saturated(cls, num_layers: int, n_max: int, gate_open, rank_keep) -> "MaskSet":
        """Mask set with probabilities pushed to exactly 0/1 decisions.

        ``gate_open``: bool per layer; ``rank_keep``: bool[n_max] per layer.
        Used by FLOPs agreement checks to realize a binary plan as masks.
        log_alpha = +-60 pushes the closed-side activation probability below
        the rounding threshold of float64 sums against integer token counts,
        so expected counts are exactly integral.
        """
        big = 60.0
        gates = [big if g else -big for g in gate_open]
        ranks = [np.where(np.asarray(k, dtype=bool), big, -big).astype(np.float64) for k in rank_keep]
        return cls(num_layers, n_max, gates, ranks)


def monte_carlo_active_prob(log_alpha: float, u: np.ndarray) -> tuple[float, float]:
    """MC estimate of P(mask > 0) and its standard error from given draws."""
    samples = sample_mask(float(log_alpha), u)
    hits = (samples > 0.0).astype(np.float64)
    p = float(hits.mean())
    se = float(hits.std(ddof=1) / math.sqrt(hits.size))
    return p, se
