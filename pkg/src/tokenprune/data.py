"""Dataset generation, ingestion and on-disk format.

A dataset directory holds line-delimited JSON records plus a manifest:

    train.jsonl / test.jsonl   {"tokens": [...], "label": k, "signal_positions": [...]}
    manifest.json              vocab size, special ids, generation spec, seed

Special token ids are fixed: CLS=0, SEP=1, PAD=2, UNK=3.

The synthetic benchmark is a needle task: sequences of noise tokens with k
planted signal tokens drawn from class-specific signal vocabularies at
random positions. The label is decidable only from the signal tokens, and
the planted positions are recorded per example so pruning runs can be
audited for whether the informative tokens survived. Noise token frequency
follows a Zipf-like law so a few non-informative tokens are common enough
to attract early-layer attention.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .fileio import dumps_canonical, read_json, sha256_file, write_json, atomic_write_text
from .rng import Rng, derive_seed

CLS_ID = 0
SEP_ID = 1
PAD_ID = 2
UNK_ID = 3
NUM_SPECIAL = 4

DATASET_FORMAT_VERSION = 1


@dataclass
class Example:
    tokens: np.ndarray  # includes CLS/SEP and possibly PAD
    label: int
    n_real: int
    signal_positions: tuple = ()

    def real_tokens(self) -> np.ndarray:
        return self.tokens[: self.n_real]


@dataclass
class Dataset:
    train: list
    test: list
    manifest: dict
    path: str | None = None

    @property
    def vocab_size(self) -> int:
        return int(self.manifest["vocab_size"])

    @property
    def num_classes(self) -> int:
        return int(self.manifest["num_classes"])

    @property
    def max_len(self) -> int:
        return int(self.manifest["max_len"])


@dataclass(frozen=True)
class NeedleSpec:
    seq_len: int = 64
    vocab_size: int = 200
    num_classes: int = 2
    train_count: int = 5000
    test_count: int = 1000
    seed: int = 57
    signal_count: int = 4
    signals_per_class: int = 4
    noise_zipf_exponent: float = 1.1
    # probability a planted token is drawn from the label's signal set
    # (the rest come from other classes' sets); < 1 keeps the Bayes accuracy
    # away from 1 so attention quality keeps mattering during pruning
    signal_purity: float = 1.0

    def __post_init__(self):
        body = self.seq_len - 2
        if body < 1:
            raise ConfigError("seq_len must leave room for CLS and SEP")
        if self.signal_count > body:
            raise ConfigError("signal_count exceeds body length")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        noise = self.vocab_size - NUM_SPECIAL - self.num_classes * self.signals_per_class
        if noise < 1:
            raise ConfigError("vocab too small for the signal sets plus noise")
        if not 0.0 < self.signal_purity <= 1.0:
            raise ConfigError("signal_purity must lie in (0, 1]")

    def to_dict(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "vocab_size": self.vocab_size,
            "num_classes": self.num_classes,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "seed": self.seed,
            "signal_count": self.signal_count,
            "signals_per_class": self.signals_per_class,
            "noise_zipf_exponent": self.noise_zipf_exponent,
            "signal_purity": self.signal_purity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeedleSpec":
        return cls(**d)

    def signal_ids(self, label: int) -> range:
        start = NUM_SPECIAL + label * self.signals_per_class
        return range(start, start + self.signals_per_class)

    def noise_ids(self) -> range:
        return range(NUM_SPECIAL + self.num_classes * self.signals_per_class, self.vocab_size)


def _zipf_cumulative(count: int, exponent: float) -> np.ndarray:
    w = 1.0 / np.power(np.arange(1, count + 1, dtype=np.float64), exponent)
    c = np.cumsum(w)
    return c / c[-1]


def _gen_example(spec: NeedleSpec, rng: Rng, noise_cum: np.ndarray) -> Example:
    body_len = spec.seq_len - 2
    label = rng.randbelow(spec.num_classes)
    noise_ids = spec.noise_ids()
    body = np.empty(body_len, dtype=np.int64)
    for i in range(body_len):
        u = rng.u01()
        body[i] = noise_ids[int(np.searchsorted(noise_cum, u))]
    positions = list(range(body_len))
    rng.shuffle(positions)
    signal_positions = sorted(positions[: spec.signal_count])
    for p in signal_positions:
        cls = label
        if spec.signal_purity < 1.0 and rng.u01() >= spec.signal_purity:
            shift = 1 + rng.randbelow(spec.num_classes - 1)
            cls = (label + shift) % spec.num_classes
        sig_ids = list(spec.signal_ids(cls))
        body[p] = sig_ids[rng.randbelow(len(sig_ids))]
    tokens = np.concatenate(([CLS_ID], body, [SEP_ID])).astype(np.int64)
    return Example(
        tokens=tokens,
        label=label,
        n_real=spec.seq_len,
        signal_positions=tuple(p + 1 for p in signal_positions),
    )


def generate_needle(spec: NeedleSpec) -> Dataset:
    """Deterministic needle dataset from the generation spec."""
    noise_cum = _zipf_cumulative(len(spec.noise_ids()), spec.noise_zipf_exponent)
    splits = {}
    for split, count in (("train", spec.train_count), ("test", spec.test_count)):
        rng = Rng(derive_seed(spec.seed, f"needle-{split}"))
        splits[split] = [_gen_example(spec, rng, noise_cum) for _ in range(count)]
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "needle",
        "vocab_size": spec.vocab_size,
        "num_classes": spec.num_classes,
        "max_len": spec.seq_len,
        "special_tokens": {"cls": CLS_ID, "sep": SEP_ID, "pad": PAD_ID, "unk": UNK_ID},
        "seed": spec.seed,
        "generation": spec.to_dict(),
        "counts": {"train": spec.train_count, "test": spec.test_count},
    }
    return Dataset(train=splits["train"], test=splits["test"], manifest=manifest)


def _example_to_record(ex: Example) -> dict:
    return {
        "tokens": [int(t) for t in ex.tokens],
        "label": int(ex.label),
        "signal_positions": [int(p) for p in ex.signal_positions],
    }


def _record_to_example(rec: dict, line_no: int, path: str) -> Example:
    try:
        tokens = np.asarray(rec["tokens"], dtype=np.int64)
        label = int(rec["label"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{path}:{line_no}: malformed record ({exc})") from exc
    real = np.flatnonzero(tokens != PAD_ID)
    n_real = int(real[-1]) + 1 if real.size else 0
    if n_real == 0:
        raise DataError(f"{path}:{line_no}: record has no real tokens")
    return Example(
        tokens=tokens,
        label=label,
        n_real=n_real,
        signal_positions=tuple(int(p) for p in rec.get("signal_positions", ())),
    )


def save_dataset(dataset: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for split in ("train", "test"):
        rows = [dumps_canonical(_example_to_record(ex)) for ex in getattr(dataset, split)]
        atomic_write_text(os.path.join(out_dir, f"{split}.jsonl"), "\n".join(rows) + ("\n" if rows else ""))
    write_json(os.path.join(out_dir, "manifest.json"), dataset.manifest)
    dataset.path = out_dir


def load_dataset(path: str) -> Dataset:
    manifest_path = os.path.join(path, "manifest.json")
    if not os.path.exists(manifest_path):
        raise DataError(f"no manifest.json in {path}")
    manifest = read_json(manifest_path)
    splits = {}
    for split in ("train", "test"):
        fname = os.path.join(path, f"{split}.jsonl")
        examples = []
        if os.path.exists(fname):
            with open(fname, "r", encoding="utf-8") as fh:
                import json as _json

                for line_no, line in enumerate(fh, start=1):
                    line = line.strip()
                    if not line:
                        continue
                    try:
                        rec = _json.loads(line)
                    except ValueError as exc:
                        raise DataError(f"{fname}:{line_no}: invalid JSON ({exc})") from exc
                    examples.append(_record_to_example(rec, line_no, fname))
        splits[split] = examples
    return Dataset(train=splits["train"], test=splits["test"], manifest=manifest, path=path)


def dataset_checksum(path: str) -> str:
    """Stable content hash over manifest and split files."""
    parts = []
    for name in ("manifest.json", "train.jsonl", "test.jsonl"):
        fpath = os.path.join(path, name)
        if os.path.exists(fpath):
            parts.append(f"{name}:{sha256_file(fpath)}")
    import hashlib

    return hashlib.sha256("|".join(parts).encode()).hexdigest()


def ingest_jsonl(path: str, max_len: int, vocab_cap: int) -> Dataset:
    """Build a dataset from raw {"text"| "tokens", "label"} JSONL records.

    Text is lowercased and whitespace-tokenized; the vocabulary keeps the
    ``vocab_cap`` most frequent words (ties broken alphabetically), the rest
    map to UNK. Sequences are wrapped as CLS + body + SEP and padded to
    ``max_len``; over-long bodies are truncated before SEP.
    """
    import json as _json

    if max_len < 3:
        raise ConfigError("max_len must be >= 3")
    if not os.path.exists(path):
        raise DataError(f"no such file: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = _json.loads(line)
            except ValueError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON ({exc})") from exc
            if "label" not in rec or ("text" not in rec and "tokens" not in rec):
                raise DataError(f"{path}:{line_no}: record needs 'label' and 'text' or 'tokens'")
            records.append((line_no, rec))
    if not records:
        raise DataError(f"{path}: empty dataset")

    text_mode = "text" in records[0][1]
    vocab = {}
    if text_mode:
        counts = {}
        for _, rec in records:
            for word in str(rec["text"]).lower().split():
                counts[word] = counts.get(word, 0) + 1
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:vocab_cap]
        vocab = {word: NUM_SPECIAL + i for i, (word, _) in enumerate(ranked)}

    examples = []
    max_label = 0
    for line_no, rec in records:
        if text_mode:
            body = [vocab.get(w, UNK_ID) for w in str(rec["text"]).lower().split()]
        else:
            body = [int(t) for t in rec["tokens"]]
            if any(t < 0 for t in body):
                raise DataError(f"{path}:{line_no}: negative token id")
        body = body[: max_len - 2]
        seq = [CLS_ID] + body + [SEP_ID]
        seq = seq + [PAD_ID] * (max_len - len(seq))
        label = int(rec["label"])
        if label < 0:
            raise DataError(f"{path}:{line_no}: negative label")
        max_label = max(max_label, label)
        examples.append(
            Example(tokens=np.asarray(seq, dtype=np.int64), label=label, n_real=2 + len(body))
        )
    if text_mode:
        vocab_size = NUM_SPECIAL + len(vocab)
    else:
        vocab_size = max(int(ex.tokens.max()) for ex in examples) + 1
    vocab_size = max(vocab_size, NUM_SPECIAL + 1)
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "kind": "ingested",
        "vocab_size": int(vocab_size),
        "num_classes": max_label + 1,
        "max_len": max_len,
        "special_tokens": {"cls": CLS_ID, "sep": SEP_ID, "pad": PAD_ID, "unk": UNK_ID},
        "source": os.path.basename(path),
        "vocab": vocab if text_mode else None,
        "counts": {"train": len(examples), "test": 0},
    }
    return Dataset(train=examples, test=[], manifest=manifest)
