"""Cross-attentive pair scorer: one encoder pass over ``[CLS] a [SEP] b [SEP]``,
a linear head on the final CLS state, raw logits out."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import encoder as enc
from .data import Dataset, TaskKind, TrainingExample, split_dataset
from .encoder import EncoderConfig, EncoderWeights, InputError, build_pair_input
from .metrics import compute_metrics, headline_metric
from .numkernel import Parameter, SeededRng, Tensor, cross_entropy, squared_l2
from .training import EpochRecord, TrainConfig, fit

log = logging.getLogger(__name__)

SCORE_BATCH = 256


@dataclass
class TeacherModel:
    encoder: EncoderWeights
    head_w: Parameter  # (H, n)
    head_b: Parameter  # (n,)
    task: TaskKind

    def __post_init__(self):
        h = self.encoder.config.hidden
        if self.head_w.shape != (h, self.task.n) or self.head_b.shape != (self.task.n,):
            raise ValueError(f"teacher head shapes {self.head_w.shape}/{self.head_b.shape} do not fit H={h}, n={self.task.n}")

    @classmethod
    def init(cls, config: EncoderConfig, task: TaskKind, seed: int) -> "TeacherModel":
        rng = SeededRng(seed)
        encoder = EncoderWeights.init(config, rng.spawn(1))
        head_w = Parameter(rng.spawn(2).normal((config.hidden, task.n), config.init_std))
        return cls(encoder, head_w, Parameter(np.zeros(task.n)), task)

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def parameters(self) -> dict[str, Parameter]:
        params = {f"enc.{k}": p for k, p in self.encoder.params.items()}
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def copy(self) -> "TeacherModel":
        return TeacherModel(self.encoder.copy(), self.head_w.copy(), self.head_b.copy(), self.task)


def _pair_arrays(t: TeacherModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]):
    return enc.stack_inputs([build_pair_input(a, b, t.config.max_len) for a, b in pairs])


def teacher_logits(t: TeacherModel, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], batch_size: int = SCORE_BATCH) -> Tensor:
    """Logits for many pairs, ``(N, n)``; exactly one encoder pass per pair."""
    out = np.empty((len(pairs), t.task.n))
    for start in range(0, len(pairs), batch_size):
        ids, seg, mask = _pair_arrays(t, pairs[start : start + batch_size])
        hidden, _ = enc.forward(t.encoder, ids, seg, mask)
        out[start : start + len(ids)] = hidden[-1][:, 0, :] @ t.head_w.value + t.head_b.value
    return out


def teacher_score(t: TeacherModel, a: Sequence[int], b: Sequence[int]) -> Tensor:
    """Raw logits T(a, b) of shape ``(n,)``; no softmax applied."""
    return teacher_logits(t, [(a, b)])[0]


def label_loss(logits: Tensor, labels: np.ndarray, task: TaskKind) -> tuple[Tensor, Tensor]:
    """Per-row ground-truth loss and its gradient w.r.t. the logits."""
    if task.is_classification:
        return cross_entropy(logits, labels)
    return squared_l2(logits, np.asarray(labels, dtype=np.float64).reshape(-1, 1))


def teacher_batch_loss(
    t: TeacherModel, examples: Sequence[TrainingExample], backward: bool = True, kinks: list | None = None
) -> float:
    """Mean label loss over ``examples``; accumulates gradients when ``backward``."""
    ids, seg, mask = _pair_arrays(t, [(ex.sentence_a, ex.sentence_b) for ex in examples])
    hidden, cache = enc.forward(t.encoder, ids, seg, mask, keep_cache=backward, kinks=kinks)
    cls = hidden[-1][:, 0, :]
    logits = cls @ t.head_w.value + t.head_b.value
    losses, dlogits = label_loss(logits, np.array([ex.label for ex in examples]), t.task)
    if backward:
        dlogits = dlogits / len(examples)
        t.head_w.grad += cls.T @ dlogits
        t.head_b.grad += dlogits.sum(axis=0)
        dh = np.zeros_like(hidden[-1])
        dh[:, 0, :] = dlogits @ t.head_w.value.T
        enc.backward(t.encoder, cache, {t.config.num_layers: dh})
    return float(losses.mean())


def evaluate_teacher(t: TeacherModel, ds: Dataset, batch_size: int = SCORE_BATCH) -> tuple[float, Tensor]:
    """Mean label loss and ``(N, n)`` logits over a dataset."""
    logits = teacher_logits(t, [(ex.sentence_a, ex.sentence_b) for ex in ds], batch_size)
    losses, _ = label_loss(logits, np.array([ex.label for ex in ds]), ds.task)
    return float(losses.mean()), logits


def _check_labels(ds: Dataset, task: TaskKind) -> None:
    if ds.task is not task:
        raise InputError(f"dataset task {ds.task.value} does not match model task {task.value}")
    ds.validate()


def fine_tune_teacher(
    dataset: Dataset,
    cfg: TrainConfig,
    config: EncoderConfig | None = None,
    model: TeacherModel | None = None,
    trace: list[EpochRecord] | None = None,
) -> TeacherModel:
    """Train on ground-truth labels and return the best-dev-loss teacher.

    A fresh model is initialised from ``cfg.seed`` unless ``model`` is given
    (it is copied, never mutated). Per-epoch records are appended to ``trace``.
    """
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    model = model.copy() if model is not None else TeacherModel.init(config or EncoderConfig(), dataset.task, cfg.seed)
    _check_labels(dataset, model.task)
    train, dev = split_dataset(dataset, cfg.dev_fraction, cfg.seed)

    def step(idx):
        return teacher_batch_loss(model, [train.examples[i] for i in idx]) * len(idx)

    def dev_eval():
        loss, logits = evaluate_teacher(model, dev)
        return loss, headline_metric(compute_metrics(logits, [ex.label for ex in dev], dev.task))

    records = fit(
        model.parameters(),
        list(model.parameters()),
        len(train),
        step,
        dev_eval,
        cfg,
        evaluate_train=lambda: evaluate_teacher(model, train)[0],
    )
    if trace is not None:
        trace.extend(records)
    return model


def cache_teacher_scores(t: TeacherModel, dataset: Dataset, batch_size: int = SCORE_BATCH) -> Dataset:
    """Copy of ``dataset`` whose examples carry the teacher's logits."""
    if len(dataset) == 0:
        return replace(dataset, examples=[])
    logits = teacher_logits(t, [(ex.sentence_a, ex.sentence_b) for ex in dataset], batch_size)
    examples = [replace(ex, teacher_logits=logits[i].copy()) for i, ex in enumerate(dataset)]
    return replace(dataset, examples=examples)
