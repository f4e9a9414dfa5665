"""Evaluation metrics for classification and regression pair tasks."""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import TaskKind


class _Undefined:
    """Marker for a metric that is mathematically undefined on the given data."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "undefined"

    def __bool__(self) -> bool:
        return False


UNDEFINED = _Undefined()


@dataclass
class Metrics:
    accuracy: float | None = None
    f1: float | _Undefined | None = None
    pearson: float | _Undefined | None = None
    spearman: float | _Undefined | None = None
    mse: float | None = None

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            out[f.name] = "undefined" if v is UNDEFINED else float(v)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def argmax_low(logits: np.ndarray) -> np.ndarray:
    """Row argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(logits), axis=-1)


def pearson(x: np.ndarray, y: np.ndarray) -> float | _Undefined:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    denom = np.sqrt(sxx) * np.sqrt(syy)
    if denom == 0.0:
        return UNDEFINED
    return float(np.clip((dx @ dy) / denom, -1.0, 1.0))


def spearman(x: np.ndarray, y: np.ndarray) -> float | _Undefined:
    return pearson(rankdata(x, method="average"), rankdata(y, method="average"))


def binary_f1(pred: np.ndarray, labels: np.ndarray) -> float | _Undefined:
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels != 1)))
    fn = int(np.sum((pred != 1) & (labels == 1)))
    if tp + fp + fn == 0:
        return UNDEFINED
    return 2 * tp / (2 * tp + fp + fn)


def compute_metrics(predictions, labels: Sequence, task: TaskKind) -> Metrics:
    """Score predictions against labels.

    Classification predictions are logits ``(N, n)`` (or already-decided class
    indices ``(N,)``); regression predictions are ``(N,)`` or ``(N, 1)``.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    labels = np.asarray(labels)
    if len(preds) != len(labels) or len(labels) == 0:
        raise ValueError(f"need equal-length nonempty sequences, got {len(preds)} and {len(labels)}")
    if task.is_classification:
        cls = argmax_low(preds) if preds.ndim == 2 else preds.astype(np.int64)
        labels = labels.astype(np.int64)
        acc = float(np.mean(cls == labels))
        f1 = binary_f1(cls, labels) if task is TaskKind.BINARY else None
        return Metrics(accuracy=acc, f1=f1)
    values = preds.reshape(len(labels), -1)[:, -1]
    labels = labels.astype(np.float64)
    diff = values - labels
    return Metrics(
        mse=float(np.mean(diff * diff)),
        pearson=pearson(values, labels),
        spearman=spearman(values, labels),
    )


def headline_metric(m: Metrics) -> float | None:
    """Single number for loss traces: accuracy, else Pearson."""
    if m.accuracy is not None:
        return m.accuracy
    return None if m.pearson is UNDEFINED else m.pearson
