"""Seeded synthetic datasets.

byte_lm: an order-1 Markov chain over 64 symbols with a planted long-range
pattern — each position copies the token 16 steps back with probability
0.25 — so models gain from attention, not just bigram statistics.

toy_classify: 6 classes, each keyed to a planted 3-gram; the label is the
argmax over per-class keyword counts (ties to the lowest class), recomputed
from the finished sequence rather than trusted from the generator.

Splits are hash-based on sequence content, so identical sequences can never
land on both sides.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InputError, ValidationError

TASKS = ("byte_lm", "toy_classify")

LM_VOCAB = 64
LM_COPY_LAG = 16
LM_COPY_PROB = 0.25
NUM_CLASSES = 6
KEYWORD_LEN = 3


@dataclass
class SequenceDataset:
    task: str
    vocab_size: int
    seq_len: int
    seed: int
    train: np.ndarray
    val: np.ndarray
    train_labels: np.ndarray | None = None
    val_labels: np.ndarray | None = None

    def split(self, name: str) -> np.ndarray:
        if name == "train":
            return self.train
        if name == "val":
            return self.val
        raise InputError(f"unknown split {name!r}")

    def split_labels(self, name: str) -> np.ndarray:
        labels = self.train_labels if name == "train" else self.val_labels
        if labels is None:
            raise InputError(f"{self.task} has no labels")
        return labels

    @property
    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.train.tobytes())
        h.update(self.val.tobytes())
        if self.train_labels is not None:
            h.update(self.train_labels.tobytes())
            h.update(self.val_labels.tobytes())
        return h.hexdigest()


def _val_mask_by_content(seqs: np.ndarray) -> np.ndarray:
    return np.asarray([zlib.crc32(row.tobytes()) % 10 == 0 for row in seqs], dtype=bool)


def _gen_byte_lm(num_sequences: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    # Spiky per-symbol transition rows: a handful of likely successors each.
    trans = rng.dirichlet(np.full(LM_VOCAB, 0.05), size=LM_VOCAB)
    seqs = np.empty((num_sequences, seq_len + 1), dtype=np.uint8)
    for i in range(num_sequences):
        row = seqs[i]
        row[0] = rng.integers(LM_VOCAB)
        for t in range(1, seq_len + 1):
            if t >= LM_COPY_LAG and rng.random() < LM_COPY_PROB:
                row[t] = row[t - LM_COPY_LAG]
            else:
                row[t] = rng.choice(LM_VOCAB, p=trans[row[t - 1]])
    return seqs


def classify_keywords(seed: int) -> np.ndarray:
    """The planted per-class 3-grams, distinct by construction."""
    rng = np.random.default_rng(seed ^ 0x5EED)
    grams: list[tuple[int, ...]] = []
    while len(grams) < NUM_CLASSES:
        g = tuple(int(v) for v in rng.integers(LM_VOCAB, size=KEYWORD_LEN))
        if g not in grams:
            grams.append(g)
    return np.asarray(grams, dtype=np.uint8)


def keyword_counts(seq: np.ndarray, keywords: np.ndarray) -> np.ndarray:
    """Overlapping occurrence counts of each keyword in one sequence."""
    seq = np.asarray(seq)
    windows = np.lib.stride_tricks.sliding_window_view(seq, KEYWORD_LEN)
    return np.asarray([(windows == kw).all(axis=1).sum() for kw in keywords], dtype=np.int64)


def label_of(seq: np.ndarray, keywords: np.ndarray) -> int:
    """argmax of keyword counts; ties go to the lowest class index."""
    return int(np.argmax(keyword_counts(seq, keywords)))


def _gen_toy_classify(num_sequences: int, seq_len: int, seed: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if seq_len < 2 * KEYWORD_LEN:
        raise InputError(f"seq_len must be >= {2 * KEYWORD_LEN} for keyword planting")
    keywords = classify_keywords(seed)
    seqs = np.empty((num_sequences, seq_len), dtype=np.uint8)
    labels = np.empty(num_sequences, dtype=np.int64)
    slots = seq_len // KEYWORD_LEN
    for i in range(num_sequences):
        row = rng.integers(LM_VOCAB, size=seq_len).astype(np.uint8)
        cls = int(rng.integers(NUM_CLASSES))
        copies = int(rng.integers(2, 5))
        for slot in rng.choice(slots, size=min(copies, slots), replace=False):
            row[slot * KEYWORD_LEN : slot * KEYWORD_LEN + KEYWORD_LEN] = keywords[cls]
        seqs[i] = row
        labels[i] = label_of(row, keywords)  # rule decides, not intent
    return seqs, labels


def gen_dataset(task: str, num_sequences: int, seq_len: int, seed: int = 0) -> SequenceDataset:
    """Generate a dataset deterministically from (task, sizes, seed)."""
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}, expected one of {TASKS}")
    if num_sequences < 10:
        raise InputError(f"need at least 10 sequences, got {num_sequences}")
    if seq_len < 1:
        raise InputError(f"seq_len must be >= 1, got {seq_len}")
    rng = np.random.default_rng(seed)
    if task == "byte_lm":
        seqs = _gen_byte_lm(num_sequences, seq_len, rng)
        val = _val_mask_by_content(seqs)
        if not val.any() or val.all():
            raise InputError("degenerate split; grow num_sequences")
        return SequenceDataset(task=task, vocab_size=LM_VOCAB, seq_len=seq_len, seed=seed,
                               train=seqs[~val], val=seqs[val])
    seqs, labels = _gen_toy_classify(num_sequences, seq_len, seed, rng)
    val = _val_mask_by_content(seqs)
    if not val.any() or val.all():
        raise InputError("degenerate split; grow num_sequences")
    return SequenceDataset(task=task, vocab_size=LM_VOCAB, seq_len=seq_len, seed=seed,
                           train=seqs[~val], val=seqs[val],
                           train_labels=labels[~val], val_labels=labels[val])


# === on-disk form ===


def save_dataset(ds: SequenceDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "train.npy", ds.train)
    np.save(out / "val.npy", ds.val)
    if ds.train_labels is not None:
        np.save(out / "train_labels.npy", ds.train_labels)
        np.save(out / "val_labels.npy", ds.val_labels)
    meta = {
        "task": ds.task,
        "vocab_size": ds.vocab_size,
        "seq_len": ds.seq_len,
        "seed": ds.seed,
        "train_sequences": int(ds.train.shape[0]),
        "val_sequences": int(ds.val.shape[0]),
        "sha256": ds.content_hash,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> SequenceDataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FormatError(f"{path}: not a dataset directory (no meta.json)")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{meta_path}: unparseable: {e}") from None
    try:
        ds = SequenceDataset(
            task=meta["task"],
            vocab_size=int(meta["vocab_size"]),
            seq_len=int(meta["seq_len"]),
            seed=int(meta["seed"]),
            train=np.load(path / "train.npy"),
            val=np.load(path / "val.npy"),
            train_labels=np.load(path / "train_labels.npy")
            if (path / "train_labels.npy").exists() else None,
            val_labels=np.load(path / "val_labels.npy")
            if (path / "val_labels.npy").exists() else None,
        )
    except (KeyError, OSError, ValueError) as e:
        raise FormatError(f"{path}: corrupt dataset: {e}") from None
    if ds.content_hash != meta.get("sha256"):
        raise FormatError(f"{path}: content hash mismatch; files were modified")
    return ds
