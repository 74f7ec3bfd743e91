"""Deterministic desk-scale classification datasets.

Token ids: 0 is PAD, 1 is UNK, content ids start at 2.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

PAD, UNK = 0, 1
FIRST_ID = 2
INTERCHANGE_MAGIC = "#softrank-dataset"
INTERCHANGE_VERSION = 1


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    examples: list[tuple[tuple[int, ...], int]]
    vocab_size: int
    n_classes: int
    split: str = "all"
    reference_accuracy: Optional[float] = None
    vocab: Optional[list[str]] = field(default=None, repr=False)

    def __post_init__(self):
        for ids, label in self.examples:
            if not 0 <= label < self.n_classes:
                raise DataError(f"label {label} outside [0, {self.n_classes})")
            if ids and (min(ids) < 0 or max(ids) >= self.vocab_size):
                raise DataError(f"token id outside [0, {self.vocab_size})")

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, y in self.examples], dtype=np.int64)

    def subset(self, idx: Sequence[int], split: str) -> "Dataset":
        return Dataset(
            [self.examples[i] for i in idx], self.vocab_size, self.n_classes, split, self.reference_accuracy, self.vocab
        )


# ---------------------------------------------------------------- synthetic task


def _marker_pairs(n_classes: int) -> list[tuple[int, int]]:
    # Class c is marked by the ordered bigram (m_c, m_{c+1}); for two classes
    # the unigram counts are identical and only the order carries the label.
    return [(FIRST_ID + c, FIRST_ID + (c + 1) % n_classes) for c in range(n_classes)]


def reference_classify(ids: Sequence[int], n_classes: int) -> int:
    """Majority vote over planted class bigrams; ties go to the smaller class id."""
    lookup = {pair: c for c, pair in enumerate(_marker_pairs(n_classes))}
    votes = np.zeros(n_classes, dtype=np.int64)
    for a, b in zip(ids, ids[1:]):
        c = lookup.get((a, b))
        if c is not None:
            votes[c] += 1
    return int(np.argmax(votes))


def synth_generate(
    seed: int,
    n: int,
    seq_len: int = 16,
    vocab_size: int = 32,
    n_classes: int = 2,
    difficulty: float = 0.0,
    n_markers: int = 3,
) -> Dataset:
    """Sequences with planted class bigrams among noise tokens.

    Each of the ``n_markers`` planted bigrams is swapped for a different
    class's bigram with probability ``difficulty``. The reference
    (majority-vote) accuracy is recorded on the returned dataset.
    """
    if n_classes < 2:
        raise DataError("n_classes must be at least 2")
    if not 0.0 <= difficulty <= 1.0:
        raise DataError(f"difficulty must lie in [0, 1], got {difficulty}")
    noise_lo = FIRST_ID + n_classes
    if vocab_size < noise_lo + 2:
        raise DataError(f"vocab_size must be at least {noise_lo + 2} for {n_classes} classes")
    n_markers = max(1, min(n_markers, (seq_len + 1) // 3))
    if seq_len < 2:
        raise DataError("seq_len must be at least 2")

    rng = np.random.default_rng(seed)
    pairs = _marker_pairs(n_classes)
    labels = rng.permutation(np.arange(n) % n_classes)
    min_len = max(3 * n_markers - 1, seq_len // 2)
    examples = []
    correct = 0
    for y in labels:
        length = int(rng.integers(min_len, seq_len + 1))
        free = length - 2 * n_markers
        gaps = np.ones(n_markers + 1, dtype=np.int64)
        gaps[0] = gaps[-1] = 0
        gaps += rng.multinomial(free - (n_markers - 1), np.full(n_markers + 1, 1.0 / (n_markers + 1)))
        tokens: list[int] = []
        for j in range(n_markers):
            tokens.extend(rng.integers(noise_lo, vocab_size, size=gaps[j]).tolist())
            cls = int(y)
            if rng.random() < difficulty:
                cls = int(rng.choice([c for c in range(n_classes) if c != y]))
            tokens.extend(pairs[cls])
        tokens.extend(rng.integers(noise_lo, vocab_size, size=gaps[-1]).tolist())
        ids = tuple(int(t) for t in tokens)
        correct += reference_classify(ids, n_classes) == y
        examples.append((ids, int(y)))
    ref = correct / n if n else None
    return Dataset(examples, vocab_size, n_classes, "all", ref)


# ---------------------------------------------------------------- CSV


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def csv_load(path, text_column: str, label_column: str, vocab_cap: int = 10_000) -> Dataset:
    """Load a UTF-8 CSV with a header row into a whitespace-tokenised dataset.

    The vocabulary keeps the ``vocab_cap`` most frequent tokens, ordered by
    (count desc, token); everything else maps to UNK.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        for col in (text_column, label_column):
            if col not in reader.fieldnames:
                raise DataError(f"{path}: missing column {col!r} (have {reader.fieldnames})")
        rows = [(tokenize(r[text_column] or ""), (r[label_column] or "").strip()) for r in reader]
    if not rows:
        raise DataError(f"{path}: no data rows")

    counts = Counter(tok for toks, _ in rows for tok in toks)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:vocab_cap]
    vocab = ["<pad>", "<unk>"] + [tok for tok, _ in ranked]
    index = {tok: i for i, tok in enumerate(vocab)}

    raw_labels = [lab for _, lab in rows]
    try:
        label_ids = [int(lab) for lab in raw_labels]
        if min(label_ids) < 0:
            raise ValueError
        n_classes = max(label_ids) + 1
    except ValueError:
        names = sorted(set(raw_labels))
        label_ids = [names.index(lab) for lab in raw_labels]
        n_classes = len(names)
    n_classes = max(n_classes, 2)

    examples = [(tuple(index.get(t, UNK) for t in toks), y) for (toks, _), y in zip(rows, label_ids)]
    return Dataset(examples, len(vocab), n_classes, "all", None, vocab)


# ---------------------------------------------------------------- splits, batches, interchange


def train_val_split(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    if not 0.0 < val_fraction < 1.0:
        raise DataError(f"val_fraction must lie in (0, 1), got {val_fraction}")
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_val = max(1, int(round(val_fraction * len(ds))))
    return ds.subset(sorted(perm[n_val:]), "train"), ds.subset(sorted(perm[:n_val]), "val")


def pad_batch(seqs: Sequence[Sequence[int]], max_len: Optional[int] = None) -> np.ndarray:
    """Right-pad with PAD to the longest sequence (truncated at ``max_len``)."""
    longest = max((len(s) for s in seqs), default=0)
    width = max(1, longest if max_len is None else min(longest, max_len))
    out = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        s = s[:width]
        out[i, : len(s)] = s
    return out


def iter_batches(
    ds: Dataset, batch_size: int, rng: Optional[np.random.Generator] = None, max_len: Optional[int] = None
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (ids, labels) batches; shuffled when ``rng`` is given."""
    order = np.arange(len(ds)) if rng is None else rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        seqs = [ds.examples[i][0] for i in idx]
        labels = np.array([ds.examples[i][1] for i in idx], dtype=np.int64)
        yield pad_batch(seqs, max_len), labels


def save_interchange(ds: Dataset, path) -> None:
    """One record per line: ``label<TAB>id id id``, after a metadata header."""
    lines = [
        f"{INTERCHANGE_MAGIC}\t{INTERCHANGE_VERSION}\tvocab_size={ds.vocab_size}\tn_classes={ds.n_classes}\tsplit={ds.split}"
    ]
    lines += [f"{y}\t{' '.join(map(str, ids))}" for ids, y in ds.examples]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_interchange(path) -> Dataset:
    try:
        text = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None
    if not text or not text[0].startswith(INTERCHANGE_MAGIC + "\t"):
        raise DataError(f"{path}: not a dataset interchange file")
    head = text[0].split("\t")
    if int(head[1]) != INTERCHANGE_VERSION:
        raise DataError(f"{path}: unsupported interchange version {head[1]}")
    meta = dict(kv.split("=", 1) for kv in head[2:])
    examples = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line:
            continue
        try:
            label, ids = line.split("\t")
            examples.append((tuple(int(t) for t in ids.split()), int(label)))
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed record") from None
    return Dataset(examples, int(meta["vocab_size"]), int(meta["n_classes"]), meta.get("split", "all"))
