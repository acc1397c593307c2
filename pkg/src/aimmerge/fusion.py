"""Rehearsal-based knowledge fusion.

At a merge the update since the previous merge (new knowledge) and the update
produced by a short fine-tune on memory data (historical knowledge) are
blended onto the previous merge point, with weights read off the controller's
two signals.
"""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import trainer
from .param_space import apply_merge, l1_rate, task_vector
from .tasks import memory_training_batches, sample_probe
from .exceptions import ValidationError


class MergeSignals(NamedTuple):
    """What the controller knew when it asked for a merge."""

    n_up: int
    l_w: int
    f_count: int
    f_max: int
    actual_interval: int
    reason: str = "scheduled"


@dataclass
class MergeEvent:
    merge_index: int
    task_id: int
    iteration: int
    actual_interval: int
    reason: str
    lambda_value: float
    n_up: int
    l_w_used: int
    f_count_at_merge: int
    alpha1: float
    alpha2: float
    mem_loss_before: Optional[float]
    mem_loss_after: Optional[float]
    rehearsal_steps: int

    def to_dict(self):
        return asdict(self)


def fusion_weights(n_up, l_w, f_count, f_max):
    """Normalised ``(alpha1, alpha2)`` from the upward-trend share and activation share."""
    if not (0 <= n_up <= l_w and 0 <= f_count <= f_max):
        raise ValidationError(f"bad signal counts n_up={n_up}/{l_w}, f={f_count}/{f_max}")
    p_new = Fraction(n_up, l_w)
    p_past = Fraction(f_count, f_max)
    if p_new + p_past == 0:
        return 1.0, 0.0
    # exact ratio, then complement, so the pair sums to exactly 1.0 in floating point
    alpha1 = float(p_new / (p_new + p_past))
    return alpha1, 1.0 - alpha1


def rehearsal_steps_for(actual_interval):
    return math.ceil(actual_interval / 2)


def rehearsal_finetune(theta_j, spec, buffer, steps, lr, rng, batch_size=trainer.DEFAULT_BATCH_SIZE):
    """Plain SGD on memory batches starting from ``theta_j``; ``theta_j`` is not modified."""
    if steps < 0:
        raise ValidationError("steps must be >= 0")
    theta = np.array(theta_j, dtype=np.float64, copy=True)
    if steps == 0 or buffer.empty:
        return theta
    for batch in memory_training_batches(buffer, batch_size, steps, rng):
        _, grad = trainer.loss_and_grad(theta, spec, batch)
        theta = trainer.sgd_step(theta, grad, lr)
    return theta


def execute_merge(theta_anchor, theta_j, spec, buffer, signals, lr, rng, *,
                  batch_size=trainer.DEFAULT_BATCH_SIZE, fixed_alpha=None,
                  merge_index=0, task_id=0, iteration=0):
    """Fuse new and historical knowledge; returns ``(theta_hat, event)``.

    ``fixed_alpha`` replaces the signal-derived weights with a constant pair
    (the manual global weighting ablation). With an empty memory nothing
    historical exists to fuse, so the result is ``theta_j`` whatever the
    weights would have been.
    """
    tau_new = task_vector(theta_anchor, theta_j)
    lambda_value = l1_rate(tau_new, signals.actual_interval)

    if buffer.empty:
        n_rehearsal = 0
        alpha1, alpha2 = 1.0, 0.0
        tau_past = np.zeros_like(tau_new)
        before = after = None
    else:
        n_rehearsal = rehearsal_steps_for(signals.actual_interval)
        probe = sample_probe(buffer, batch_size, rng)
        before = trainer.loss(theta_j, spec, probe)
        theta_mem = rehearsal_finetune(theta_j, spec, buffer, n_rehearsal, lr, rng, batch_size)
        tau_past = task_vector(theta_j, theta_mem)
        if fixed_alpha is None:
            alpha1, alpha2 = fusion_weights(signals.n_up, signals.l_w, signals.f_count, signals.f_max)
        else:
            alpha1, alpha2 = (float(a) for a in fixed_alpha)

    theta_hat = apply_merge(theta_anchor, tau_new, tau_past, alpha1, alpha2)
    if before is not None:
        after = trainer.loss(theta_hat, spec, probe)
    event = MergeEvent(
        merge_index=merge_index,
        task_id=task_id,
        iteration=iteration,
        actual_interval=int(signals.actual_interval),
        reason=str(signals.reason),
        lambda_value=lambda_value,
        n_up=int(signals.n_up),
        l_w_used=int(signals.l_w),
        f_count_at_merge=int(signals.f_count),
        alpha1=float(alpha1),
        alpha2=float(alpha2),
        mem_loss_before=before,
        mem_loss_after=after,
        rehearsal_steps=n_rehearsal,
    )
    return theta_hat, event
