"""Synthetic continual-learning task sequences and the rehearsal memory.

Every task shares one Gaussian-mixture classification problem (same label
space, same class means) seen through a task-specific input transform. Since
the transforms disagree, fitting a later task drags the shared weights away
from what earlier tasks need, which is exactly the interference a
continual learner has to cope with.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ValidationError
from .trainer import Batch

INTERFERENCE_MODES = ("rotation", "permutation", "mean-shift")
MEMORY_PRESETS = (0.02, 0.05, 0.10, 0.50)


@dataclass(frozen=True)
class SequenceSpec:
    num_tasks: int = 4
    input_dim: int = 16
    classes_per_task: int = 4
    samples_per_task: int = 500
    test_samples_per_task: int = 200
    interference_mode: str = "rotation"
    # degrees added per task in every rotation plane
    rotation_deg: float = 90.0
    mean_shift_scale: float = 3.0
    class_sep: float = 1.0
    noise_std: float = 1.0
    seed: int = 0
    # test hook: every task uses the identity permutation
    identity_permutation: bool = False

    def __post_init__(self):
        if self.num_tasks < 2:
            raise ValidationError("a task sequence needs at least 2 tasks")
        for name in ("input_dim", "classes_per_task", "samples_per_task", "test_samples_per_task"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.classes_per_task < 2:
            raise ValidationError("classes_per_task must be >= 2")
        if self.interference_mode not in INTERFERENCE_MODES:
            raise ValidationError(
                f"interference_mode must be one of {INTERFERENCE_MODES}, got {self.interference_mode!r}")
        if self.noise_std <= 0 or self.class_sep <= 0:
            raise ValidationError("noise_std and class_sep must be positive")


@dataclass
class TaskDataset:
    task_id: int
    train: Batch
    test: Batch

    @property
    def n_train(self):
        return len(self.train)

    def to_csv(self, path, split="train"):
        batch = getattr(self, split)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(batch.inputs.shape[1])] + ["label"])
            for row, label in zip(batch.inputs, batch.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])


def _rotation(dim, angle, rng):
    """Rotate by ``angle`` radians in floor(dim/2) random disjoint coordinate planes."""
    order = rng.permutation(dim)
    rot = np.eye(dim)
    c, s = math.cos(angle), math.sin(angle)
    for i, j in zip(order[0::2], order[1::2]):
        rot[i, i] = c
        rot[j, j] = c
        rot[i, j] = -s
        rot[j, i] = s
    return rot


def _balanced_labels(n, n_classes, rng):
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


def generate_sequence(spec):
    """Build ``spec.num_tasks`` datasets, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    d, c = spec.input_dim, spec.classes_per_task
    means = rng.normal(0.0, spec.class_sep, size=(c, d))
    plane_rng = np.random.default_rng(rng.integers(2**63))
    base_rotation = _rotation(d, math.radians(spec.rotation_deg), plane_rng)

    tasks = []
    for k in range(1, spec.num_tasks + 1):
        task_rng = np.random.default_rng([spec.seed, k])
        if spec.interference_mode == "rotation":
            transform = np.linalg.matrix_power(base_rotation, k - 1)
            shift = np.zeros(d)
        elif spec.interference_mode == "permutation":
            perm = np.arange(d) if (k == 1 or spec.identity_permutation) else task_rng.permutation(d)
            transform = np.eye(d)[:, perm]
            shift = np.zeros(d)
        else:
            transform = np.eye(d)
            shift = np.zeros(d) if k == 1 else task_rng.normal(0.0, spec.mean_shift_scale, size=d)

        def draw(n):
            labels = _balanced_labels(n, c, task_rng)
            z = means[labels] + task_rng.normal(0.0, spec.noise_std, size=(n, d))
            return Batch(z @ transform + shift, labels)

        tasks.append(TaskDataset(k, draw(spec.samples_per_task), draw(spec.test_samples_per_task)))
    return tasks


@dataclass
class MemoryBuffer:
    capacity_fraction: float = 0.02
    per_task: dict = field(default_factory=dict)

    def __post_init__(self):
        _check_fraction(self.capacity_fraction)

    def __len__(self):
        return sum(len(b) for b in self.per_task.values())

    @property
    def empty(self):
        return not self.per_task

    def union(self):
        batches = [self.per_task[k] for k in sorted(self.per_task)]
        return Batch(np.vstack([b.inputs for b in batches]),
                     np.concatenate([b.labels for b in batches]))

    def task_of_rows(self):
        """Task id of every row of :meth:`union`, in the same order."""
        return np.concatenate([np.full(len(self.per_task[k]), k) for k in sorted(self.per_task)])


def _check_fraction(fraction):
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"memory fraction must lie in (0, 1], got {fraction}")


def memory_size(fraction, n_samples):
    _check_fraction(fraction)
    return min(n_samples, math.ceil(fraction * n_samples))


def store_memory(buffer, task, fraction, rng):
    """Store ceil(fraction * N) uniformly chosen training samples of ``task``."""
    n_keep = memory_size(fraction, task.n_train)
    idx = np.sort(rng.choice(task.n_train, size=n_keep, replace=False))
    buffer.per_task[task.task_id] = Batch(task.train.inputs[idx].copy(), task.train.labels[idx].copy())
    return buffer


def sample_probe(buffer, batch_size, rng):
    """A batch drawn uniformly with replacement from all stored samples, or None."""
    if batch_size < 1:
        raise ValidationError("batch_size must be >= 1")
    if buffer.empty:
        return None
    pool = buffer.union()
    idx = rng.integers(0, len(pool), size=batch_size)
    return Batch(pool.inputs[idx], pool.labels[idx])


def memory_training_batches(buffer, batch_size, steps, rng):
    if buffer.empty:
        raise ValidationError("cannot draw training batches from an empty memory")
    return [sample_probe(buffer, batch_size, rng) for _ in range(steps)]
