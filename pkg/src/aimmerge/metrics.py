"""Continual-learning metrics over an accuracy matrix.

``a[i, j]`` is the test accuracy on task ``i`` after training through task
``j`` (0-based here; only ``j >= i`` is meaningful). ``a0[i]`` is the accuracy
of a model trained on task ``i`` alone from the same initialisation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .exceptions import ValidationError


@dataclass
class AccuracyMatrix:
    a: np.ndarray
    a0: Optional[np.ndarray] = None

    @classmethod
    def empty(cls, n_tasks):
        return cls(np.full((n_tasks, n_tasks), np.nan), None)

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        if self.a.ndim != 2 or self.a.shape[0] != self.a.shape[1]:
            raise ValidationError("accuracy matrix must be square")
        if self.a0 is not None:
            self.a0 = np.asarray(self.a0, dtype=np.float64)
            if self.a0.shape != (self.n_tasks,):
                raise ValidationError("a0 must have one entry per task")

    @property
    def n_tasks(self):
        return self.a.shape[0]

    def record_row(self, after_task, accuracies):
        """Store accuracies on every task after training task ``after_task``."""
        self.a[:, after_task] = accuracies

    def check_complete(self):
        k = self.n_tasks
        for i in range(k):
            for j in range(i, k):
                v = self.a[i, j]
                if not (np.isfinite(v) and 0.0 <= v <= 1.0):
                    raise ValidationError(f"accuracy a[{i}][{j}] missing or outside [0, 1]")

    def final_column(self):
        return self.a[:, -1].copy()

    def to_lists(self):
        out = {"a": [[None if np.isnan(v) else float(v) for v in row] for row in self.a]}
        out["a0"] = None if self.a0 is None else [float(v) for v in self.a0]
        return out


@dataclass
class MetricsReport:
    op: float
    bwt: float
    fwt: Optional[float]
    per_task_final: list = field(default_factory=list)


def _mean_ascending(values):
    total = 0.0
    for v in values:
        total += v
    return float(total / len(values))


def compute_op(m):
    m.check_complete()
    k = m.n_tasks
    return _mean_ascending([m.a[i, k - 1] for i in range(k)])


def compute_bwt(m):
    if m.n_tasks < 2:
        raise ValidationError("BWT needs at least two tasks")
    m.check_complete()
    k = m.n_tasks
    return _mean_ascending([m.a[i, k - 1] - m.a[i, i] for i in range(k - 1)])


def compute_fwt(m):
    if m.a0 is None:
        raise ValidationError("FWT needs individually-trained accuracies a0")
    m.check_complete()
    return _mean_ascending([m.a[i, i] - m.a0[i] for i in range(m.n_tasks)])


def report(m):
    return MetricsReport(
        op=compute_op(m),
        bwt=compute_bwt(m),
        fwt=None if m.a0 is None else compute_fwt(m),
        per_task_final=[float(v) for v in m.final_column()],
    )
