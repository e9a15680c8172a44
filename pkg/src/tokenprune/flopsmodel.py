"""Expected-FLOPs model over mask expectations and the constraint penalty.

Cost convention (used identically by the inference-time counter so the two
always agree exactly): a layer processing T incoming tokens is charged

    4*d^2*T + 2*d*T^2 + heads*T^2 + 2*d*ffn_inner*T

in multiply-accumulates (plus the heads*T^2 softmax allowance). T is the
count ENTERING the layer; pruning inside layer i therefore pays off from
layer i+1 onward, and the FFN of the pruning layer is charged at its
incoming count even though it executes on the reduced set. Embedding and
classifier-head costs are excluded.

Expected entering counts are differentiable: with g = P(gate > 0) and
p_j = P(rank_j > 0), the count after a layer is
(1 - g) * T + g * sum_j p_j * occ(T, j) where occ(T, j) = clamp(T-j+1, 0, 1)
is the soft indicator that rank position j is occupied. occ is exact at
binary masks and piecewise linear elsewhere. Rank position 1 is pinned to
probability 1 (classification token).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoder import ModelConfig
from .errors import ConfigError, InputError
from .masks import MaskSet, active_prob
from .tensor import Tensor


def layer_flops(tokens, cfg: ModelConfig):
    """Per-layer cost at a (possibly fractional) token count.

    Works on floats and scalar Tensors; MHA term 4*d^2*T + 2*d*T^2 + H*T^2,
    FFN term 2*d*d'*T.
    """
    d, dp, h = cfg.hidden, cfg.ffn_inner, cfg.heads
    linear = 4.0 * d * d + 2.0 * d * dp
    quad = 2.0 * d + h
    return tokens * linear + (tokens * tokens) * quad


def full_model_flops(cfg: ModelConfig, n: int) -> float:
    return cfg.num_layers * float(layer_flops(float(n), cfg))


@dataclass(frozen=True)
class FlopsBudget:
    full_flops: float
    target_sparsity: float

    def __post_init__(self):
        if not 0.0 <= self.target_sparsity < 1.0:
            raise ConfigError("target_sparsity must lie in [0, 1)")
        if self.full_flops <= 0:
            raise ConfigError("full_flops must be positive")

    @property
    def target_flops(self) -> float:
        return self.full_flops * (1.0 - self.target_sparsity)


class LagrangeState:
    """Constraint multipliers, updated by gradient ascent."""

    def __init__(self, lambda1: float = 0.0, lambda2: float = 0.0):
        self.lambda1 = Tensor(float(lambda1), requires_grad=True)
        self.lambda2 = Tensor(float(lambda2), requires_grad=True)

    def parameters(self) -> list[Tensor]:
        return [self.lambda1, self.lambda2]

    def values(self) -> tuple[float, float]:
        return self.lambda1.item(), self.lambda2.item()


def occupancy(count, position: int):
    """Soft indicator that 1-based rank ``position`` is occupied at ``count`` tokens."""
    if isinstance(count, Tensor):
        return T.clamp01(T.add(count, -(position - 1.0)))
    return min(1.0, max(0.0, float(count) - (position - 1.0)))


def expected_tokens(mask_set: MaskSet, n: int) -> list:
    """Expected retained-token counts entering each layer (scalar Tensors).

    Entry 0 is the real-token count n entering layer 1; entry i is the
    expected count entering layer i+1 after layer i's pruning. Counts are
    non-increasing and differentiable in every mask parameter.
    """
    if n > mask_set.n_max:
        raise InputError(f"n={n} exceeds mask capacity {mask_set.n_max}")
    offsets = np.arange(mask_set.n_max, dtype=np.float64)
    pin = np.zeros(mask_set.n_max)
    pin[0] = 1.0
    keep_pin = 1.0 - pin
    counts = [Tensor(float(n))]
    for layer in range(mask_set.num_layers - 1):
        prev = counts[-1]
        g = active_prob(mask_set.gate[layer])
        p = active_prob(mask_set.rank[layer])
        p_pinned = T.add(T.mul(p, Tensor(keep_pin)), Tensor(pin))
        occ = T.clamp01(T.add(T.mul(Tensor(np.ones(mask_set.n_max)), prev), Tensor(-offsets)))
        kept = T.dot(p_pinned, occ)
        nxt = T.add(T.mul(prev, 1.0 - g), T.mul(kept, g))
        counts.append(nxt)
    return counts


def expected_model_flops(mask_set: MaskSet, cfg: ModelConfig, n: int):
    """c(M): expected cost summed over layers at their entering counts."""
    if cfg.num_layers != mask_set.num_layers:
        raise ConfigError("mask set and model disagree on layer count")
    total = Tensor(0.0)
    for count in expected_tokens(mask_set, n):
        total = T.add(total, layer_flops(count, cfg))
    return total


def lagrangian_penalty(c, target, state: LagrangeState):
    """lambda1 * (c - C) + lambda2 * (c - C)^2.

    Minimized in the mask parameters and maximized in the multipliers (the
    trainer negates the multiplier gradients).
    """
    c = c if isinstance(c, Tensor) else Tensor(float(c))
    diff = T.add(c, -float(target))
    return T.add(T.mul(state.lambda1, diff), T.mul(state.lambda2, T.mul(diff, diff)))


def sparsity_schedule(step: int, warmup_steps: int, target: float) -> float:
    """Linear 0 -> target over the warmup, constant afterwards."""
    if warmup_steps < 1:
        raise InputError("warmup_steps must be >= 1")
    return min(float(target), float(target) * step / warmup_steps)
