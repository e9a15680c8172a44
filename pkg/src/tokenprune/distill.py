"""Ranking distillation: graded relevance, NDCG, and the pairwise loss.

The teacher's final-layer importance ranking is converted to integer
relevance grades by splitting the ranked list into G_max+1 near-equal
contiguous bands (top band = G_max, bottom = 0; the classification token is
always G_max). Banding keeps the exponential gains 2^grade bounded while
emphasizing the top of the list.

The distillation objective is the NDCG-weighted pairwise logistic loss: for
every pair with grade_i > grade_j,

    |dNDCG_ij| * log(1 + exp(-sigma * (s_i - s_j)))

where |dNDCG_ij| = |gain_i - gain_j| * |1/log2(1+pi_i) - 1/log2(1+pi_j)| /
idealDCG at the current score-induced positions pi. Pair weights are
recomputed each call and treated as constants (no gradient through the
sort).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InputError
from .scoring import TokenRanking
from .tensor import Tensor

GRADE_MAX = 4


def relevance_grades(ranking: TokenRanking, g_max: int = GRADE_MAX) -> np.ndarray:
    """Integer grades per token index; unranked (invalid) tokens get -1."""
    if g_max < 1:
        raise InputError("g_max must be >= 1")
    m = len(ranking.order)
    grades = np.full(ranking.rank_of.shape[0], -1, dtype=np.int64)
    for pos, tok in enumerate(ranking.order):
        band = (pos * (g_max + 1)) // m
        grades[tok] = g_max - band
    return grades


def dcg(grades_in_order) -> float:
    """Discounted cumulative gain of grades listed best-position first."""
    return sum((2.0**g - 1.0) / math.log2(pos + 1.0) for pos, g in enumerate(grades_in_order, start=1))


def _positions_by_score(scores: np.ndarray) -> np.ndarray:
    """1-based positions after sorting by score desc, ties by index."""
    order = sorted(range(scores.shape[0]), key=lambda i: (-scores[i], i))
    pos = np.empty(scores.shape[0], dtype=np.int64)
    for p, i in enumerate(order, start=1):
        pos[i] = p
    return pos


def ndcg(scores, grades) -> float:
    """NDCG of a score-induced order against integer grades; in [0, 1]."""
    scores = np.asarray(scores, dtype=np.float64)
    grades = np.asarray(grades, dtype=np.int64)
    ideal = dcg(sorted(grades.tolist(), reverse=True))
    if ideal == 0.0:
        return 1.0
    pos = _positions_by_score(scores)
    got = sum((2.0 ** grades[i] - 1.0) / math.log2(pos[i] + 1.0) for i in range(grades.shape[0]))
    return got / ideal


def lambda_pair_context(scores: np.ndarray, grades: np.ndarray, g_max: int = GRADE_MAX):
    """(i_idx, j_idx, weights) for all pairs with grade_i > grade_j.

    Weights are the NDCG deltas at the current positions; returns None when
    no pair has distinct grades or the ideal DCG vanishes.
    """
    grades = np.asarray(grades, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    ideal = dcg(sorted(grades.tolist(), reverse=True))
    if ideal == 0.0:
        return None
    pos = _positions_by_score(scores)
    gains = 2.0 ** grades.astype(np.float64) - 1.0
    disc = 1.0 / np.log2(pos + 1.0)
    gi, gj = np.meshgrid(grades, grades, indexing="ij")
    ii, jj = np.nonzero(gi > gj)
    if ii.size == 0:
        return None
    weights = np.abs(gains[ii] - gains[jj]) * np.abs(disc[ii] - disc[jj]) / ideal
    return ii, jj, weights


def lambda_loss(student_scores: Tensor, grades, sigma: float = 1.0, pair_context=None) -> Tensor:
    """NDCG-weighted pairwise logistic ranking loss (weights detached)."""
    grades = np.asarray(grades, dtype=np.int64)
    if student_scores.data.shape != grades.shape:
        raise InputError("lambda_loss: scores and grades must align")
    ctx = pair_context if pair_context is not None else lambda_pair_context(student_scores.data, grades)
    if ctx is None:
        return Tensor(0.0)
    ii, jj, weights = ctx
    diff = T.add(T.gather1d(student_scores, ii), T.mul(T.gather1d(student_scores, jj), -1.0))
    return T.weighted_sum(T.softplus(T.mul(diff, -sigma)), weights)


@dataclass
class TeacherRanking:
    """Frozen final-layer ranking of one example plus its grades."""

    order: list
    grades: np.ndarray

    def to_dict(self) -> dict:
        return {"order": [int(i) for i in self.order], "grades": [int(g) for g in self.grades]}

    @classmethod
    def from_dict(cls, d: dict) -> "TeacherRanking":
        return cls(order=list(d["order"]), grades=np.asarray(d["grades"], dtype=np.int64))


def num_early_layers(num_layers: int) -> int:
    """Distillation targets the first ceil(L/3) layers."""
    return math.ceil(num_layers / 3)


def build_teacher_rankings(params, token_seqs, g_max: int = GRADE_MAX) -> list[TeacherRanking]:
    """Final-layer rankings of the unpruned model over a dataset."""
    from .encoder import model_forward
    from .scoring import importance_scores, rank_tokens

    out = []
    for seq in token_seqs:
        trace = model_forward(params, seq)
        valid = np.ones(len(seq), dtype=bool)
        s = importance_scores(trace.attention[-1], valid, layer=params.cfg.num_layers - 1, cls_index=0)
        ranking = rank_tokens(s)
        out.append(TeacherRanking(order=ranking.order, grades=relevance_grades(ranking, g_max)))
    return out


RANKINGS_FORMAT_VERSION = 1


def save_rankings(path: str, rankings, dataset_hash: str, teacher_checksum: str) -> None:
    """Cache teacher rankings keyed by dataset content and teacher weights."""
    from .fileio import write_json

    write_json(
        path,
        {
            "format_version": RANKINGS_FORMAT_VERSION,
            "dataset_sha256": dataset_hash,
            "teacher_sha256": teacher_checksum,
            "rankings": [r.to_dict() for r in rankings],
        },
    )


def load_rankings(path: str, dataset_hash: str, teacher_checksum: str):
    """Load a rankings cache; None when missing or keyed to other inputs."""
    import os

    from .fileio import read_json

    if not os.path.exists(path):
        return None
    doc = read_json(path)
    if (
        doc.get("format_version") != RANKINGS_FORMAT_VERSION
        or doc.get("dataset_sha256") != dataset_hash
        or doc.get("teacher_sha256") != teacher_checksum
    ):
        return None
    return [TeacherRanking.from_dict(d) for d in doc["rankings"]]


def distill_loss(teacher: TeacherRanking, student_scores_per_layer, participating=None, sigma: float = 1.0, pair_contexts=None) -> Tensor:
    """Sum of lambda_loss over the student's early layers.

    ``student_scores_per_layer``: one score Tensor per early layer, aligned
    with the teacher's token indexing. ``participating`` restricts the pairs
    to tokens still present in the student (non-PAD, not hard-removed);
    either one boolean mask shared by all layers or one mask per layer.
    """
    n = teacher.grades.shape[0]
    total = Tensor(0.0)
    for k, scores in enumerate(student_scores_per_layer):
        if scores.data.shape[0] != n:
            raise InputError("distill_loss: student/teacher tokenization mismatch")
        part = participating[k] if isinstance(participating, (list, tuple)) else participating
        if part is not None:
            idx = np.flatnonzero(np.asarray(part, dtype=bool))
            sub_scores = T.gather1d(scores, idx)
            sub_grades = teacher.grades[idx]
        else:
            sub_scores, sub_grades = scores, teacher.grades
        ctx = pair_contexts[k] if pair_contexts is not None else None
        total = T.add(total, lambda_loss(sub_scores, sub_grades, sigma=sigma, pair_context=ctx))
    return total
