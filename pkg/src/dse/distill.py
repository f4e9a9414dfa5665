"""Pairwise distillation: the mixed teacher/label loss and the student trainer."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset, TaskKind, TrainingExample, split_dataset
from .encoder import InputError
from .metrics import Metrics, compute_metrics, headline_metric  # noqa: F401 - re-exported
from .numkernel import Tensor, cross_entropy, squared_l2
from .student import StudentModel, embed_batch, head_backward, head_forward, student_forward_backward, student_logits
from .training import EpochRecord, TrainConfig, fit


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    task: TaskKind = TaskKind.BINARY

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1], got {self.alpha}")


def distill_loss_batch(S: Tensor, T: Tensor | None, R: Sequence, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Per-row ``alpha * ||S - T||^2 + (1 - alpha) * label_loss(S, R)`` and its gradient w.r.t. S.

    A term whose weight is zero is not evaluated at all, so the result is
    bit-independent of T when alpha = 0 and of R when alpha = 1.
    """
    S = np.atleast_2d(np.asarray(S, dtype=np.float64))
    loss = np.zeros(len(S))
    grad = np.zeros_like(S)
    if cfg.alpha > 0.0:
        if T is None:
            raise ConfigurationError("alpha > 0 requires cached teacher logits")
        l_dstl, g_dstl = squared_l2(S, np.atleast_2d(np.asarray(T, dtype=np.float64)))
        loss = loss + cfg.alpha * l_dstl
        grad = grad + cfg.alpha * g_dstl
    if cfg.alpha < 1.0:
        if cfg.task.is_classification:
            l_lbl, g_lbl = cross_entropy(S, np.atleast_1d(np.asarray(R, dtype=np.int64)))
        else:
            l_lbl, g_lbl = squared_l2(S, np.asarray(R, dtype=np.float64).reshape(-1, 1))
        loss = loss + (1.0 - cfg.alpha) * l_lbl
        grad = grad + (1.0 - cfg.alpha) * g_lbl
    return loss, grad


def distill_loss(S: Tensor, T: Tensor | None, R, cfg: LossConfig) -> float:
    """Loss of a single example (S, T of shape ``(n,)``, R a class index or real value)."""
    if cfg.alpha > 0.0 and T is None:
        raise ConfigurationError("alpha > 0 requires cached teacher logits")
    loss, _ = distill_loss_batch(np.asarray(S)[None], None if T is None else np.asarray(T)[None], [R], cfg)
    return float(loss[0])


def _targets(examples: Sequence[TrainingExample], cfg: LossConfig):
    T = None
    if cfg.alpha > 0.0:
        if any(ex.teacher_logits is None for ex in examples):
            raise ConfigurationError("alpha > 0 requires cached teacher logits on every example")
        T = np.stack([ex.teacher_logits for ex in examples])
    R = [ex.label for ex in examples]
    return T, R


def student_batch_loss(
    s: StudentModel,
    examples: Sequence[TrainingExample],
    loss_cfg: LossConfig,
    train_encoder: bool = True,
    backward: bool = True,
    kinks: list | None = None,
) -> float:
    """Mean distillation loss over ``examples``, accumulating gradients when ``backward``."""
    T, R = _targets(examples, loss_cfg)

    def loss_grad(logits):
        loss, grad = distill_loss_batch(logits, T, R, loss_cfg)
        return float(loss.mean()), grad / len(examples)

    pairs = [(ex.sentence_a, ex.sentence_b) for ex in examples]
    return student_forward_backward(s, pairs, loss_grad, train_encoder, kinks, backward)


def evaluate_student(s: StudentModel, ds: Dataset, loss_cfg: LossConfig) -> tuple[float, Tensor]:
    logits = student_logits(s, [(ex.sentence_a, ex.sentence_b) for ex in ds])
    T, R = _targets(ds.examples, loss_cfg)
    loss, _ = distill_loss_batch(logits, T, R, loss_cfg)
    return float(loss.mean()), logits


def encoder_checksum(s: StudentModel) -> str:
    h = hashlib.sha256()
    for name in sorted(s.encoder.params):
        h.update(name.encode())
        h.update(s.encoder.params[name].value.astype("<f8").tobytes())
    return h.hexdigest()


def train_student(
    dataset: Dataset,
    student: StudentModel,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
) -> tuple[StudentModel, list[EpochRecord]]:
    """Adam-train a copy of ``student`` on the mixed loss; returns the best-dev model and its trace.

    With ``freeze_encoder`` only the head is updated. The encoder is then a
    fixed function, so every sentence is embedded once up front.
    """
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    if dataset.task is not student.task or loss_cfg.task is not student.task:
        raise InputError("dataset, loss and student tasks must agree")
    dataset.validate()
    s = student.copy()
    train, dev = split_dataset(dataset, train_cfg.dev_fraction, train_cfg.seed)
    _targets(train.examples[:1], loss_cfg)

    if train_cfg.freeze_encoder:
        trainable = list(s.head_parameters())
        sents = [ex.sentence_a for ex in train] + [ex.sentence_b for ex in train]
        emb = embed_batch(s, sents)
        n = len(train)
        emb_a, emb_b = emb[:n], emb[n:]
        T_all, R_all = _targets(train.examples, loss_cfg)

        def step(idx):
            logits, cache = head_forward(s, emb_a[idx], emb_b[idx])
            T = None if T_all is None else T_all[idx]
            loss, grad = distill_loss_batch(logits, T, [R_all[i] for i in idx], loss_cfg)
            head_backward(s, grad / len(idx), cache)
            return float(loss.sum())

        def train_eval():
            logits, _ = head_forward(s, emb_a, emb_b)
            return float(distill_loss_batch(logits, T_all, R_all, loss_cfg)[0].mean())

    else:
        trainable = list(s.parameters())

        def step(idx):
            return student_batch_loss(s, [train.examples[i] for i in idx], loss_cfg) * len(idx)

        def train_eval():
            return evaluate_student(s, train, loss_cfg)[0]

    def dev_eval():
        loss, logits = evaluate_student(s, dev, loss_cfg)
        return loss, headline_metric(compute_metrics(logits, [ex.label for ex in dev], dev.task))

    trace = fit(s.parameters(), trainable, len(train), step, dev_eval, train_cfg, evaluate_train=train_eval)
    return s, trace


def logit_mse(a: Tensor, b: Tensor) -> float:
    """Mean over examples of the squared L2 distance between logit vectors."""
    diff = np.asarray(a) - np.asarray(b)
    return float(np.mean(np.sum(diff * diff, axis=-1)))
