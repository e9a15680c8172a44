"""Attention-received token importance and deterministic rankings.

A token's importance at a layer is the attention it receives, averaged over
heads and over valid query tokens (column means of the attention tensor).
The typeset row-sum variant is identically 1 after softmax and carries no
signal; the received-attention convention is what the scoring is meant to
capture and is used throughout.

Rankings sort by score descending with ties broken by smaller original
position; the classification token, when present, is pinned to rank 1 so it
can never be pruned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import EncoderParams, model_forward
from .errors import InputError
from .tensor import Tensor

TIE_BREAK_RULE = "score-desc-position-asc"

DEFAULT_RANK_BUCKETS = ((1, 3), (10, 15), (20, 25))


@dataclass
class ImportanceScores:
    layer: int
    scores: np.ndarray  # -inf sentinel on invalid (PAD) tokens
    valid: np.ndarray
    cls_index: int | None = None

    def __post_init__(self):
        if not self.valid.any():
            raise InputError("importance scores need at least one valid token")


@dataclass
class TokenRanking:
    order: list  # token indices, best first
    rank_of: np.ndarray  # 1-based rank per token, 0 for invalid
    tie_break: str = TIE_BREAK_RULE


def importance_scores(attn, valid, layer: int = 0, cls_index: int | None = None) -> ImportanceScores:
    """Mean attention received per token over heads and valid query rows.

    attn: [H, n, n] (Tensor or ndarray), row-stochastic over valid keys.
    """
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, :, :]
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        raise InputError("importance_scores: no valid tokens")
    nq = int(valid.sum())
    scores = a[:, valid, :].sum(axis=(0, 1)) / (a.shape[0] * nq)
    scores[~valid] = -np.inf
    return ImportanceScores(layer=layer, scores=scores, valid=valid, cls_index=cls_index)


def rank_tokens(s: ImportanceScores) -> TokenRanking:
    """Descending-score ranking of the valid tokens (deterministic ties)."""
    idx = np.flatnonzero(s.valid)
    order = sorted(idx.tolist(), key=lambda i: (-s.scores[i], i))
    if s.cls_index is not None and s.valid[s.cls_index]:
        order.remove(s.cls_index)
        order.insert(0, s.cls_index)
    rank_of = np.zeros(s.scores.shape[0], dtype=np.intp)
    for pos, tok in enumerate(order, start=1):
        rank_of[tok] = pos
    return TokenRanking(order=order, rank_of=rank_of)


def rank_positions_from_weights(scores: np.ndarray, alive: np.ndarray, cls_index: int | None = None) -> TokenRanking:
    """Ranking restricted to currently-alive tokens (soft-mask training path)."""
    return rank_tokens(
        ImportanceScores(layer=0, scores=np.where(alive, scores, -np.inf), valid=alive, cls_index=cls_index)
    )


def score_distribution_report(
    params: EncoderParams,
    token_seqs,
    layer_indices=None,
    buckets=DEFAULT_RANK_BUCKETS,
):
    """Score statistics per (layer, rank bucket) across a dataset.

    ``token_seqs`` are unpadded token-id sequences. Returns a list of row
    dicts ready for CSV emission; empty input yields an empty table.
    """
    cfg = params.cfg
    layers = list(range(cfg.num_layers)) if layer_indices is None else list(layer_indices)
    collected = {(l, b): [] for l in layers for b in range(len(buckets))}
    for seq in token_seqs:
        trace = model_forward(params, seq)
        n = len(seq)
        valid = np.ones(n, dtype=bool)
        for l in layers:
            s = importance_scores(trace.attention[l], valid, layer=l, cls_index=0)
            ranking = rank_tokens(s)
            for b, (lo, hi) in enumerate(buckets):
                for pos in range(lo, min(hi, n) + 1):
                    collected[(l, b)].append(float(s.scores[ranking.order[pos - 1]]))
    rows = []
    for l in layers:
        for b, (lo, hi) in enumerate(buckets):
            vals = np.array(collected[(l, b)], dtype=np.float64)
            if vals.size == 0:
                continue
            rows.append(
                {
                    "layer": l + 1,
                    "bucket": f"top{lo}-{hi}" if lo != 1 else f"top{hi}",
                    "count": int(vals.size),
                    "mean": float(vals.mean()),
                    "p25": float(np.percentile(vals, 25)),
                    "p50": float(np.percentile(vals, 50)),
                    "p75": float(np.percentile(vals, 75)),
                }
            )
    return rows
