"""Task kinds, training examples, the TSV dataset format and synthetic data."""

from __future__ import annotations

import io
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import RESERVED, InputError, Vocabulary, tokenize
from .numkernel import SeededRng

MAGIC = "#dse-dataset"
FORMAT_VERSION = "v1"


class TaskKind(Enum):
    BINARY = "binary"
    MULTICLASS = "multiclass"
    REGRESSION = "regression"

    @property
    def n(self) -> int:
        return {"binary": 2, "multiclass": 3, "regression": 1}[self.value]

    @property
    def is_classification(self) -> bool:
        return self is not TaskKind.REGRESSION


class DatasetFormatError(ValueError):
    pass


@dataclass
class TrainingExample:
    sentence_a: list[int]
    sentence_b: list[int]
    label: int | float
    teacher_logits: np.ndarray | None = None

    def validate(self, task: TaskKind) -> None:
        if task.is_classification:
            if int(self.label) != self.label or not 0 <= self.label < task.n:
                raise InputError(f"label {self.label!r} is not a class index in [0, {task.n})")
        elif not np.isfinite(self.label):
            raise InputError(f"regression label {self.label!r} is not finite")
        if self.teacher_logits is not None and len(self.teacher_logits) != task.n:
            raise InputError(f"teacher logits have length {len(self.teacher_logits)}, expected {task.n}")


@dataclass
class Dataset:
    examples: list[TrainingExample]
    task: TaskKind
    vocab: Vocabulary = field(default_factory=lambda: Vocabulary.synthetic(512))

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @property
    def has_teacher_logits(self) -> bool:
        return bool(self.examples) and all(ex.teacher_logits is not None for ex in self.examples)

    def subset(self, indices) -> "Dataset":
        return replace(self, examples=[self.examples[i] for i in indices])

    def validate(self) -> None:
        for ex in self.examples:
            ex.validate(self.task)


def split_indices(n: int, dev_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle, then the first ``round(n * dev_fraction)`` indices go to dev."""
    if not 0.0 < dev_fraction < 1.0:
        raise ValueError(f"dev fraction must lie in (0, 1), got {dev_fraction}")
    perm = SeededRng(seed).spawn(0xDE5).permutation(n)
    n_dev = int(round(n * dev_fraction))
    n_dev = min(max(n_dev, 1), n - 1) if n > 1 else 0
    return np.sort(perm[n_dev:]), np.sort(perm[:n_dev])


def split_dataset(ds: Dataset, dev_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    train_idx, dev_idx = split_indices(len(ds), dev_fraction, seed)
    return ds.subset(train_idx), ds.subset(dev_idx)


# --------------------------------------------------------------------------
# TSV format
# --------------------------------------------------------------------------


def _format_label(label, task: TaskKind) -> str:
    return str(int(label)) if task.is_classification else repr(float(label))


def format_dataset(ds: Dataset) -> str:
    cols = ["sentence_a", "sentence_b", "label"]
    scored = ds.has_teacher_logits
    if scored:
        cols += [f"logit_{i + 1}" for i in range(ds.task.n)]
    out = io.StringIO()
    out.write(f"{MAGIC} {FORMAT_VERSION} task={ds.task.value} columns={','.join(cols)}\n")
    for ex in ds.examples:
        row = [ds.vocab.detokenize(ex.sentence_a), ds.vocab.detokenize(ex.sentence_b), _format_label(ex.label, ds.task)]
        if scored:
            row += [repr(float(x)) for x in ex.teacher_logits]
        out.write("\t".join(row) + "\n")
    return out.getvalue()


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_dataset(ds))


def parse_dataset(path, vocab: Vocabulary | None = None) -> Dataset:
    """Read a dataset TSV; cached teacher logits are picked up when present."""
    vocab = vocab or Vocabulary.synthetic(512)
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(MAGIC):
        raise DatasetFormatError(f"{path}: line 1: missing '{MAGIC}' header")
    fields = dict(tok.split("=", 1) for tok in lines[0].split()[2:] if "=" in tok)
    version = lines[0].split()[1] if len(lines[0].split()) > 1 else ""
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: line 1: unsupported dataset version {version!r}")
    try:
        task = TaskKind(fields.get("task", ""))
    except ValueError:
        raise DatasetFormatError(f"{path}: line 1: unknown task {fields.get('task')!r}") from None
    examples = []
    width = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 3 + task.n):
            raise DatasetFormatError(f"{path}: line {lineno}: expected 3 or {3 + task.n} columns, got {len(cols)}")
        if width is None:
            width = len(cols)
        elif len(cols) != width:
            raise DatasetFormatError(f"{path}: line {lineno}: column count {len(cols)} differs from earlier rows ({width})")
        try:
            label = int(cols[2]) if task.is_classification else float(cols[2])
            logits = np.array([float(x) for x in cols[3:]]) if len(cols) > 3 else None
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        ex = TrainingExample(tokenize(cols[0], vocab), tokenize(cols[1], vocab), label, logits)
        try:
            ex.validate(task)
        except InputError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
        examples.append(ex)
    return Dataset(examples, task, vocab)


# --------------------------------------------------------------------------
# Synthetic tasks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    vocab_size: int = 512
    num_topics: int = 4
    topic_size: int = 16  # tokens owned by each topic
    min_len: int = 4
    max_len: int = 8
    noise: float = 0.1  # probability that a token is drawn from the whole vocabulary

    @classmethod
    def for_vocab(cls, vocab_size: int) -> "SyntheticConfig":
        """Default topics, shrunk so they fit a ``vocab_size`` vocabulary."""
        d = cls()
        return cls(vocab_size=vocab_size, topic_size=max(1, min(d.topic_size, (vocab_size - len(RESERVED)) // d.num_topics)))


def _topic_blocks(cfg: SyntheticConfig) -> list[np.ndarray]:
    first = len(RESERVED)
    if first + cfg.num_topics * cfg.topic_size > cfg.vocab_size:
        raise ValueError("topics do not fit in the vocabulary")
    return [first + t * cfg.topic_size + np.arange(cfg.topic_size) for t in range(cfg.num_topics)]


def _sentence(rng: SeededRng, support: np.ndarray, cfg: SyntheticConfig) -> list[int]:
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    toks = rng.choice(support, size=n)
    noisy = rng.uniform(n) < cfg.noise
    toks[noisy] = rng.integers(len(RESERVED), cfg.vocab_size, size=int(noisy.sum()))
    return [int(t) for t in toks]


def jaccard(a: Sequence[int], b: Sequence[int]) -> float:
    """Multiset Jaccard similarity: sum of min counts over sum of max counts."""
    ca, cb = Counter(a), Counter(b)
    keys = set(ca) | set(cb)
    inter = sum(min(ca[k], cb[k]) for k in keys)
    union = sum(max(ca[k], cb[k]) for k in keys)
    return inter / union if union else 1.0


def gen_synthetic(seed: int, size: int, task: TaskKind, cfg: SyntheticConfig | None = None) -> Dataset:
    """Generate a seeded synthetic sentence-pair dataset.

    Sentences are bags of tokens drawn from latent topics, each topic owning a
    contiguous block of ``topic_size`` ids; with probability ``noise`` a token
    is instead drawn uniformly from the whole vocabulary.

    * binary: label 1 when both sentences share a topic, else 0.
    * multiclass: topics live on a ring and cover two adjacent blocks each;
      label 2 = same topic, 1 = neighbouring topics (overlapping support),
      0 = disjoint supports.
    * regression: the second sentence is a partial rewrite of the first (or an
      unrelated sentence); label = multiset Jaccard similarity.
    """
    if size < 10:
        raise ValueError("synthetic datasets need at least 10 pairs")
    cfg = cfg or SyntheticConfig()
    rng = SeededRng(seed)
    blocks = _topic_blocks(cfg)
    k = cfg.num_topics
    examples = []
    for _ in range(size):
        if task is TaskKind.BINARY:
            label = int(rng.integers(0, 2))
            ta = int(rng.integers(0, k))
            tb = ta if label else (ta + int(rng.integers(1, k))) % k
            a, b = _sentence(rng, blocks[ta], cfg), _sentence(rng, blocks[tb], cfg)
        elif task is TaskKind.MULTICLASS:
            if k < 4:
                raise ValueError("multiclass synthetic task needs at least 4 topics")
            label = int(rng.integers(0, 3))
            ta = int(rng.integers(0, k))
            if label == 2:
                tb = ta
            elif label == 1:
                tb = (ta + (1 if rng.uniform() < 0.5 else -1)) % k
            else:
                tb = (ta + int(rng.integers(2, k - 1))) % k
            support = lambda t: np.concatenate([blocks[t], blocks[(t + 1) % k]])  # noqa: E731
            a, b = _sentence(rng, support(ta), cfg), _sentence(rng, support(tb), cfg)
        else:
            ta = int(rng.integers(0, k))
            a = _sentence(rng, blocks[ta], cfg)
            if rng.uniform() < 0.15:
                b = _sentence(rng, blocks[int(rng.integers(0, k))], cfg)
            else:
                keep = rng.uniform(len(a)) >= rng.uniform()
                b = [t if kp else int(rng.choice(blocks[ta])) for t, kp in zip(a, keep)]
            label = jaccard(a, b)
        examples.append(TrainingExample(a, b, label))
    return Dataset(examples, task, Vocabulary.synthetic(cfg.vocab_size))


def random_sentences(seed: int, count: int, cfg: SyntheticConfig | None = None) -> list[list[int]]:
    """Topic sentences for catalogs and queries."""
    cfg = cfg or SyntheticConfig()
    rng = SeededRng(seed)
    blocks = _topic_blocks(cfg)
    return [_sentence(rng, blocks[int(rng.integers(0, cfg.num_topics))], cfg) for _ in range(count)]
