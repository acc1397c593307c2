"""Flat parameter-vector algebra.

Parameter snapshots and task vectors are plain 1-D ``float64`` numpy arrays.
The helpers here validate them and implement the few operations merging
needs: differences between snapshots, the per-step L1 magnitude of a
difference, and the weighted fusion rule.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .exceptions import DimensionMismatchError, DivergenceError, ValidationError

MAGIC = b"AIMPVEC1"
_HEADER = struct.Struct("<8sII")


def as_param_vector(values, name="theta"):
    """Return ``values`` as a finite, non-empty 1-D float64 array."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.reshape(-1)
    if arr.size == 0:
        raise ValidationError(f"{name} must have dim > 0")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def _check_same_dim(*vectors):
    dims = {v.shape[0] for v in vectors}
    if len(dims) != 1:
        raise DimensionMismatchError(f"parameter dimensions differ: {sorted(dims)}")


def task_vector(start, end):
    """Elementwise ``end - start``: the update that moved ``start`` to ``end``."""
    start = as_param_vector(start, "start")
    end = as_param_vector(end, "end")
    _check_same_dim(start, end)
    return end - start


def add(theta, tau):
    theta = as_param_vector(theta)
    tau = as_param_vector(tau, "tau")
    _check_same_dim(theta, tau)
    return theta + tau


def l1_rate(tau, steps):
    """Sum of absolute deltas divided by the number of steps they span."""
    if int(steps) != steps or steps < 1:
        raise ValidationError(f"steps must be a positive integer, got {steps!r}")
    tau = as_param_vector(tau, "tau")
    return float(np.sum(np.abs(tau)) / steps)


def apply_merge(anchor, tau_new, tau_past, alpha1, alpha2):
    """Fuse two task vectors onto ``anchor``.

    Returns ``anchor + alpha1 * tau_new + alpha2 * tau_past``.
    """
    for name, a in (("alpha1", alpha1), ("alpha2", alpha2)):
        if not 0.0 <= a <= 1.0:
            raise ValidationError(f"{name} must lie in [0, 1], got {a}")
    anchor = as_param_vector(anchor, "anchor")
    tau_new = as_param_vector(tau_new, "tau_new")
    tau_past = as_param_vector(tau_past, "tau_past")
    _check_same_dim(anchor, tau_new, tau_past)
    with np.errstate(over="ignore", invalid="ignore"):
        merged = anchor + alpha1 * tau_new + alpha2 * tau_past
    if not np.all(np.isfinite(merged)):
        raise DivergenceError("merged parameters are non-finite")
    return merged


def to_bytes(theta):
    theta = as_param_vector(theta)
    header = _HEADER.pack(MAGIC, theta.shape[0], 0)
    return header + theta.astype("<f8").tobytes()


def from_bytes(blob):
    if len(blob) < _HEADER.size:
        raise ValidationError("snapshot shorter than its header")
    magic, dim, _reserved = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ValidationError(f"bad snapshot magic {magic!r}")
    body = blob[_HEADER.size:]
    if len(body) != 8 * dim:
        raise ValidationError(f"snapshot body holds {len(body)} bytes, expected {8 * dim}")
    return as_param_vector(np.frombuffer(body, dtype="<f8").astype(np.float64))


def save_params(theta, path):
    Path(path).write_bytes(to_bytes(theta))


def load_params(path):
    return from_bytes(Path(path).read_bytes())
