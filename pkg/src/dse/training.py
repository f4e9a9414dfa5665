"""Minibatch Adam loop shared by teacher fine-tuning and student distillation."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .numkernel import Parameter, SeededRng, adam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    freeze_encoder: bool = False
    dev_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch size must be at least 1")
        if not 0.0 < self.dev_fraction < 1.0:
            raise ValueError("dev fraction must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_metric: float | None

    def csv_row(self) -> str:
        metric = "" if self.dev_metric is None else repr(self.dev_metric)
        return f"{self.epoch},{self.train_loss!r},{self.dev_loss!r},{metric}"


TRACE_HEADER = "epoch,train_loss,dev_loss,dev_metric"


def format_trace(trace: Sequence[EpochRecord]) -> str:
    return "\n".join([TRACE_HEADER] + [r.csv_row() for r in trace]) + "\n"


def fit(
    params: Mapping[str, Parameter],
    trainable: Sequence[str],
    n_train: int,
    batch_step: Callable[[np.ndarray], float],
    evaluate_dev: Callable[[], tuple[float, float | None]],
    cfg: TrainConfig,
    evaluate_train: Callable[[], float] | None = None,
) -> list[EpochRecord]:
    """Run Adam over shuffled minibatches and restore the best-dev-loss weights.

    ``batch_step(indices)`` must accumulate mean-loss gradients into the
    parameters' ``grad`` and return the summed (not mean) loss of the batch.
    Epoch 0 records the initial model, which stays the best unless a later
    epoch strictly improves the dev loss.
    """
    if n_train < 1:
        raise ValueError("training set is empty")
    rng = SeededRng(cfg.seed).spawn(0x5A1E)
    for p in params.values():
        p.zero_grad()
    dev_loss, dev_metric = evaluate_dev()
    init_train = evaluate_train() if evaluate_train is not None else float("nan")
    trace = [EpochRecord(0, init_train, dev_loss, dev_metric)]
    best_loss = dev_loss
    best = {name: params[name].value.copy() for name in trainable}
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_train)
        total = 0.0
        for start in range(0, n_train, cfg.batch_size):
            total += batch_step(order[start : start + cfg.batch_size])
            for name in trainable:
                adam_step(params[name], cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        dev_loss, dev_metric = evaluate_dev()
        trace.append(EpochRecord(epoch, total / n_train, dev_loss, dev_metric))
        log.info("epoch %d train_loss=%.6f dev_loss=%.6f dev_metric=%s", epoch, total / n_train, dev_loss, dev_metric)
        if dev_loss < best_loss:
            best_loss = dev_loss
            best = {name: params[name].value.copy() for name in trainable}
    for name in trainable:
        params[name].value[...] = best[name]
        params[name].zero_grad()
    for p in params.values():
        p.zero_grad()
    return trace
