"""Transformer encoder: multi-head attention, FFN, residuals, post-LN.

Layer structure: X' = LN(X + MHA(X)); X_out = LN(X' + FFN(X')), with
FFN(x) = GELU(x W1) W2 and attention logits scaled by 1/sqrt(d/heads).
No biases and no dropout; the classifier reads the hidden state of the
classification token (position 0).

Token masking is soft and exact: a key weight w_j multiplies key j's
attention probability (rows renormalize) and the token's own residual
updates are scaled by its weight, so binary weights reproduce a forward
pass with those tokens physically removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateAttentionError, InputError
from .rng import Rng
from .tensor import (
    Tensor,
    cross_entropy,
    gather_rows,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    merge_heads,
    mul,
    scale_rows,
    split_heads,
    squeeze0,
    transpose_last2,
)

LN_EPS = 1e-5
INIT_STD = 0.02

LAYER_PARAM_NAMES = ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "w1", "w2", "ln2_g", "ln2_b")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden: int
    ffn_inner: int
    heads: int
    vocab_size: int
    max_len: int
    num_classes: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.hidden < self.heads or self.hidden % self.heads:
            raise ConfigError("hidden must be a positive multiple of heads")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if self.vocab_size < 5 or self.num_classes < 2 or self.ffn_inner < 1:
            raise ConfigError("vocab_size/num_classes/ffn_inner out of range")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden": self.hidden,
            "ffn_inner": self.ffn_inner,
            "heads": self.heads,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: int(v) for k, v in d.items()})


class EncoderParams:
    """Parameter container with a stable naming scheme.

    Names: ``tok_emb``, ``pos_emb``, ``layers.<i>.<piece>`` and ``head``;
    the ordering of :meth:`named` is fixed and shared by the optimizer,
    the archive format and the checksum.
    """

    def __init__(self, cfg: ModelConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self._t = tensors

    @classmethod
    def init(cls, cfg: ModelConfig, rng: Rng, std: float = INIT_STD) -> "EncoderParams":
        d, dp = cfg.hidden, cfg.ffn_inner
        t = {
            "tok_emb": Tensor(rng.normal_array((cfg.vocab_size, d), std), requires_grad=True),
            "pos_emb": Tensor(rng.normal_array((cfg.max_len, d), std), requires_grad=True),
        }
        for i in range(cfg.num_layers):
            for w in ("wq", "wk", "wv", "wo"):
                t[f"layers.{i}.{w}"] = Tensor(rng.normal_array((d, d), std), requires_grad=True)
            t[f"layers.{i}.w1"] = Tensor(rng.normal_array((d, dp), std), requires_grad=True)
            t[f"layers.{i}.w2"] = Tensor(rng.normal_array((dp, d), std), requires_grad=True)
            for ln in ("ln1", "ln2"):
                t[f"layers.{i}.{ln}_g"] = Tensor(np.ones(d), requires_grad=True)
                t[f"layers.{i}.{ln}_b"] = Tensor(np.zeros(d), requires_grad=True)
        t["head"] = Tensor(rng.normal_array((d, cfg.num_classes), std), requires_grad=True)
        return cls(cfg, t)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def layer(self, i: int) -> dict[str, Tensor]:
        return {w: self._t[f"layers.{i}.{w}"] for w in LAYER_PARAM_NAMES}

    def named(self):
        yield "tok_emb", self._t["tok_emb"]
        yield "pos_emb", self._t["pos_emb"]
        for i in range(self.cfg.num_layers):
            for w in LAYER_PARAM_NAMES:
                name = f"layers.{i}.{w}"
                yield name, self._t[name]
        yield "head", self._t["head"]

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named()]

    def copy(self) -> "EncoderParams":
        t = {name: Tensor(p.data.copy(), requires_grad=True) for name, p in self.named()}
        return EncoderParams(self.cfg, t)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named()}


@dataclass
class ForwardTrace:
    """Per-layer attention and hidden states captured by model_forward."""

    attention: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    logits: Tensor | None = None
    key_weights: list = field(default_factory=list)


def _as_weight_tensor(w, n: int) -> Tensor:
    if w is None:
        return Tensor(np.ones(n))
    t = w if isinstance(w, Tensor) else Tensor(np.asarray(w, dtype=np.float64))
    if t.data.shape != (n,):
        raise InputError(f"key weights must have shape ({n},)")
    return t


def embed(params: EncoderParams, tokens, positions=None) -> Tensor:
    """Token embedding plus positional embedding at the original positions.

    Positions are assigned once at input; pruned forwards pass the surviving
    tokens' original positions so embeddings never shift.
    """
    cfg = params.cfg
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.size == 0:
        raise InputError("embed: empty token sequence")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError("embed: token id out of range")
    if positions is None:
        positions = np.arange(ids.size, dtype=np.intp)
    else:
        positions = np.asarray(positions, dtype=np.intp)
    if positions.max() >= cfg.max_len:
        raise InputError("embed: position beyond max_len")
    tok = gather_rows(params["tok_emb"], ids)
    pos = gather_rows(params["pos_emb"], positions)
    return tok + pos


def mha_forward(x: Tensor, layer: dict[str, Tensor], key_weights, cfg: ModelConfig):
    """Multi-head self-attention; returns (output, attention [H, n, n])."""
    n = x.data.shape[0]
    w = _as_weight_tensor(key_weights, n)
    if float(w.data.sum()) == 0.0:
        raise DegenerateAttentionError("all attention keys are masked")
    scale = 1.0 / math.sqrt(cfg.head_dim)
    q = mul(split_heads(matmul(x, layer["wq"]), cfg.heads), scale)
    k = split_heads(matmul(x, layer["wk"]), cfg.heads)
    v = split_heads(matmul(x, layer["wv"]), cfg.heads)
    attn = masked_softmax(matmul(q, transpose_last2(k)), w)
    out = matmul(merge_heads(matmul(attn, v)), layer["wo"])
    return out, attn


def layer_forward(x: Tensor, layer: dict[str, Tensor], cfg: ModelConfig, key_weights=None, ffn_weights=None):
    """One encoder layer. ``ffn_weights`` (default: the key weights) scales
    the FFN residual update; the pruning trainer passes the post-pruning
    weights there so a token dropped mid-layer no longer updates."""
    n = x.data.shape[0]
    att, attn = mha_forward(x, layer, key_weights, cfg)
    if key_weights is not None:
        att = scale_rows(att, _as_weight_tensor(key_weights, n))
    x1 = layer_norm(x + att, layer["ln1_g"], layer["ln1_b"], LN_EPS)
    ff = matmul(gelu(matmul(x1, layer["w1"])), layer["w2"])
    wf = ffn_weights if ffn_weights is not None else key_weights
    if wf is not None:
        ff = scale_rows(ff, _as_weight_tensor(wf, n))
    x2 = layer_norm(x1 + ff, layer["ln2_g"], layer["ln2_b"], LN_EPS)
    return x2, attn


def classify(params: EncoderParams, hidden: Tensor) -> Tensor:
    """Logit vector from the classification token's final hidden state."""
    cls_row = gather_rows(hidden, [0])
    return squeeze0(matmul(cls_row, params["head"]))


def model_forward(params: EncoderParams, tokens, key_weights_per_layer=None, positions=None) -> ForwardTrace:
    """Run the stack with optional per-layer key weights (all-ones = unpruned)."""
    cfg = params.cfg
    x = embed(params, tokens, positions)
    n = x.data.shape[0]
    if key_weights_per_layer is None:
        key_weights_per_layer = [None] * cfg.num_layers
    if len(key_weights_per_layer) != cfg.num_layers:
        raise InputError("need one key-weight vector per layer")
    trace = ForwardTrace()
    for i in range(cfg.num_layers):
        kw = key_weights_per_layer[i]
        kw_t = _as_weight_tensor(kw, n) if kw is not None else None
        x, attn = layer_forward(x, params.layer(i), cfg, kw_t)
        trace.attention.append(attn)
        trace.hidden.append(x)
        trace.key_weights.append(kw_t.data.copy() if kw_t is not None else np.ones(n))
    trace.logits = classify(params, x)
    return trace


def downstream_loss(logits: Tensor, label: int) -> Tensor:
    return cross_entropy(logits, label)
