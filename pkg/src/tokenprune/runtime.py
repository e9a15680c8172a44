"""Hard token-dropping inference with instrumented FLOPs accounting.

The runtime is an independent numpy forward (no tape): per active layer it
computes attention, scores tokens by received attention, sorts, and
physically gathers the kept rows before the FFN runs. Surviving tokens keep
their original positions and relative order; the classification token is
structurally kept (rank position 1 is pinned in every plan).

FLOPs are counted as the multiply-accumulates of each executed product plus
the heads*T^2 softmax allowance. One convention keeps this counter and the
closed-form expected cost in exact agreement: the FFN of a layer that prunes
is charged at the layer's incoming count even though it executes on the
reduced set (see flopsmodel). Everything else is counted at true dimensions.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import backend
from .encoder import EncoderParams, LN_EPS, ModelConfig
from .errors import DegeneratePlanError, InputError
from .masks import MaskSet, binarize, deterministic_mask
from .scoring import importance_scores, rank_tokens


@dataclass(frozen=True)
class PrunePlan:
    """Binarized pruning decisions: per-layer gate plus rank-position keeps."""

    active: tuple
    keep_rank: tuple

    def __post_init__(self):
        for layer, (act, keeps) in enumerate(zip(self.active, self.keep_rank)):
            if act and not keeps[0]:
                raise DegeneratePlanError(f"layer {layer}: rank position 1 must be kept")

    @property
    def num_layers(self) -> int:
        return len(self.active)

    def to_dict(self) -> dict:
        return {
            "active": [bool(a) for a in self.active],
            "keep_rank": [[bool(k) for k in row] for row in self.keep_rank],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        return cls(
            active=tuple(bool(a) for a in d["active"]),
            keep_rank=tuple(tuple(bool(k) for k in row) for row in d["keep_rank"]),
        )


def noop_plan(num_layers: int, n_max: int) -> PrunePlan:
    return PrunePlan(
        active=tuple(False for _ in range(num_layers)),
        keep_rank=tuple(tuple(True for _ in range(n_max)) for _ in range(num_layers)),
    )


def build_plan(masks: MaskSet) -> PrunePlan:
    """Binarize a trained mask set (u = 0.5 rule, threshold 0.5, ties keep)."""
    active = tuple(binarize(deterministic_mask(g)) for g in masks.gate)
    keep = []
    for r in masks.rank:
        row = [binarize(deterministic_mask(v)) for v in r.data]
        row[0] = True
        keep.append(tuple(row))
    return PrunePlan(active=active, keep_rank=tuple(keep))


class FlopsMeter:
    """Accumulates multiply-accumulate counts of executed products."""

    def __init__(self):
        self.total = 0.0

    def product(self, m: int, k: int, p: int, rows_charged: int | None = None) -> None:
        rows = m if rows_charged is None else rows_charged
        self.total += float(rows) * k * p

    def softmax(self, heads: int, n: int) -> None:
        self.total += float(heads) * n * n


@dataclass
class InferenceResult:
    logits: np.ndarray
    retained_per_layer: list
    final_positions: np.ndarray
    final_tokens: np.ndarray
    flops: float
    wall_ns: int
    layer_positions: list | None = None

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))


def _layer_norm_np(x, gamma, beta):
    y, _, _ = backend.impl.layernorm_fwd(x, gamma, beta, LN_EPS)
    return y


def _softmax3d_np(logits):
    h, m, n = logits.shape
    return backend.impl.softmax_rows_fwd(logits.reshape(h * m, n)).reshape(h, m, n)


def infer(params: EncoderParams, plan: PrunePlan, tokens, *, collect_layers: bool = False) -> InferenceResult:
    """Hard-pruned forward of one example; PAD tokens are stripped at entry."""
    from .data import PAD_ID

    cfg = params.cfg
    if plan.num_layers != cfg.num_layers:
        raise InputError("plan and model disagree on layer count")
    ids = np.asarray(tokens, dtype=np.intp)
    keep_real = ids != PAD_ID
    ids = ids[keep_real]
    if ids.size == 0:
        raise InputError("infer: no real tokens")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError("infer: token id out of range")
    positions = np.flatnonzero(keep_real).astype(np.intp)

    t0 = time.perf_counter_ns()
    meter = FlopsMeter()
    d, dh, heads = cfg.hidden, cfg.head_dim, cfg.heads
    scale = 1.0 / np.sqrt(dh)
    x = params["tok_emb"].data[ids] + params["pos_emb"].data[positions]
    retained = []
    layer_positions = [] if collect_layers else None

    for li in range(cfg.num_layers):
        lp = {k: params[f"layers.{li}.{k}"].data for k in
              ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "w1", "w2", "ln2_g", "ln2_b")}
        t_in = x.shape[0]
        retained.append(t_in)
        if collect_layers:
            layer_positions.append(positions.copy())

        q = (x @ lp["wq"]) * scale
        k = x @ lp["wk"]
        v = x @ lp["wv"]
        meter.product(t_in, d, d)
        meter.product(t_in, d, d)
        meter.product(t_in, d, d)
        qh = q.reshape(t_in, heads, dh).transpose(1, 0, 2)
        kh = k.reshape(t_in, heads, dh).transpose(1, 0, 2)
        vh = v.reshape(t_in, heads, dh).transpose(1, 0, 2)
        logits = qh @ kh.transpose(0, 2, 1)
        meter.product(t_in, dh, t_in, rows_charged=heads * t_in)
        attn = _softmax3d_np(logits)
        meter.softmax(heads, t_in)
        ctx = attn @ vh
        meter.product(t_in, t_in, dh, rows_charged=heads * t_in)
        att_out = ctx.transpose(1, 0, 2).reshape(t_in, d) @ lp["wo"]
        meter.product(t_in, d, d)
        x1 = _layer_norm_np(x + att_out, lp["ln1_g"], lp["ln1_b"])

        if plan.active[li]:
            valid = np.ones(t_in, dtype=bool)
            cls_index = int(np.flatnonzero(positions == 0)[0]) if (positions == 0).any() else None
            ranking = rank_tokens(importance_scores(attn, valid, layer=li, cls_index=cls_index))
            kept = [ranking.order[j] for j in range(t_in) if plan.keep_rank[li][j]]
            if not kept:
                raise DegeneratePlanError(f"layer {li + 1}: plan keeps zero tokens")
            kept = sorted(kept)
            x1 = x1[kept]
            ids = ids[kept]
            positions = positions[kept]

        # FFN executes on the (possibly reduced) set but is charged at the
        # incoming count; this keeps the counter equal to the closed form.
        hin = x1 @ lp["w1"]
        meter.product(x1.shape[0], d, cfg.ffn_inner, rows_charged=t_in)
        hact = backend.impl.gelu_fwd(hin)
        ff = hact @ lp["w2"]
        meter.product(x1.shape[0], cfg.ffn_inner, d, rows_charged=t_in)
        x = _layer_norm_np(x1 + ff, lp["ln2_g"], lp["ln2_b"])

    cls_row = int(np.flatnonzero(positions == 0)[0]) if (positions == 0).any() else 0
    logits_out = x[cls_row] @ params["head"].data
    wall = time.perf_counter_ns() - t0
    return InferenceResult(
        logits=logits_out,
        retained_per_layer=retained,
        final_positions=positions.copy(),
        final_tokens=np.asarray(ids).copy(),
        flops=meter.total,
        wall_ns=wall,
        layer_positions=layer_positions,
    )


def count_flops_instrumented(params: EncoderParams, plan: PrunePlan, tokens) -> float:
    """Executed-product MAC count of a pruned forward (oracle for the model)."""
    return infer(params, plan, tokens).flops


def latency_bench(params: EncoderParams, plan: PrunePlan, examples, repeats: int = 5) -> dict:
    """Median/mean/p95 wall-clock per example at batch size 1, warm cache."""
    if repeats < 3:
        raise InputError("latency_bench requires repeats >= 3")
    examples = list(examples)
    if not examples:
        raise InputError("latency_bench: empty dataset")
    per_example = []
    for ex in examples:
        tokens = ex.real_tokens() if hasattr(ex, "real_tokens") else ex
        infer(params, plan, tokens)  # warm
        times = [infer(params, plan, tokens).wall_ns for _ in range(repeats)]
        per_example.append(float(np.median(times)))
    arr = np.asarray(per_example)
    return {
        "median_ns": float(np.median(arr)),
        "mean_ns": float(arr.mean()),
        "p95_ns": float(np.percentile(arr, 95)),
        "examples": len(per_example),
        "repeats": repeats,
    }


def retained_tokens_report(results) -> list:
    """Mean retained real-token count entering each layer, across a dataset."""
    results = list(results)
    if not results:
        return []
    num_layers = len(results[0].retained_per_layer)
    rows = []
    for layer in range(num_layers):
        vals = [r.retained_per_layer[layer] for r in results]
        rows.append({"layer": layer + 1, "mean_retained": float(np.mean(vals))})
    return rows
