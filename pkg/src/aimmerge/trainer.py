"""A small dense ReLU classifier trained with plain SGD.

The network is stored as one flat float64 parameter vector. Layers are laid
out in order, each as its weight matrix (``fan_in x fan_out``, row-major)
followed by its bias vector, so snapshots taken at any point of training line
up coordinate for coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import DimensionMismatchError, DivergenceError, ValidationError
from .param_space import as_param_vector

DEFAULT_LR = 3e-4
DEFAULT_BATCH_SIZE = 8


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden_dims: tuple = (32,)
    num_classes: int = 2
    seed: int = 0
    activation: str = field(default="relu")

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValidationError("layer widths must be positive")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.activation != "relu":
            raise ValidationError("only the relu activation is supported")

    @property
    def layer_sizes(self):
        return (self.input_dim, *self.hidden_dims, self.num_classes)

    @property
    def layer_shapes(self):
        sizes = self.layer_sizes
        return list(zip(sizes[:-1], sizes[1:]))

    @property
    def n_params(self):
        return sum((fan_in + 1) * fan_out for fan_in, fan_out in self.layer_shapes)


class Batch(NamedTuple):
    inputs: np.ndarray
    labels: np.ndarray

    @classmethod
    def of(cls, inputs, labels):
        inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if inputs.shape[0] == 0 or inputs.shape[0] != labels.shape[0]:
            raise ValidationError("batch needs >= 1 sample and one label per row")
        return cls(inputs, labels)

    def __len__(self):
        return self.labels.shape[0]

    @staticmethod
    def concat(first, second):
        return Batch(np.vstack([first.inputs, second.inputs]),
                     np.concatenate([first.labels, second.labels]))


class StepReport(NamedTuple):
    new_loss: float
    mem_loss: Optional[float]
    grad_norm: float


def unpack(theta, spec):
    """Split a flat vector into ``[(W, b), ...]`` views, one pair per layer."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (spec.n_params,):
        raise DimensionMismatchError(
            f"theta has shape {theta.shape}, model needs ({spec.n_params},)")
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_shapes:
        w = theta[offset:offset + fan_in * fan_out].reshape(fan_in, fan_out)
        offset += fan_in * fan_out
        b = theta[offset:offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def init_model(spec):
    """Scaled-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    rng = np.random.default_rng(spec.seed)
    theta = np.zeros(spec.n_params)
    for w, _b in unpack(theta, spec):
        fan_in, fan_out = w.shape
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-limit, limit, size=w.shape)
    return theta


def _check_batch(batch, spec):
    if batch.inputs.ndim != 2 or batch.inputs.shape[1] != spec.input_dim:
        raise DimensionMismatchError(
            f"inputs must have {spec.input_dim} columns, got shape {batch.inputs.shape}")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ValidationError("labels out of range")


def _forward(layers, inputs):
    activations = [inputs]
    h = inputs
    for w, b in layers[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        activations.append(h)
    w, b = layers[-1]
    return activations, h @ w + b


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


# overflow shows up as non-finite losses, which callers turn into DivergenceError
_quiet = np.errstate(over="ignore", invalid="ignore")


@_quiet
def predict_logits(theta, spec, inputs):
    inputs = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    return _forward(unpack(theta, spec), inputs)[1]


@_quiet
def sample_losses(theta, spec, batch):
    """Per-sample cross-entropy, no gradient."""
    _check_batch(batch, spec)
    logp = _log_softmax(predict_logits(theta, spec, batch.inputs))
    return -logp[np.arange(len(batch)), batch.labels]


def loss(theta, spec, batch):
    value = float(np.mean(sample_losses(theta, spec, batch)))
    if not np.isfinite(value):
        raise DivergenceError("non-finite loss")
    return value


@_quiet
def _loss_grad_and_samples(theta, spec, batch):
    _check_batch(batch, spec)
    layers = unpack(theta, spec)
    activations, logits = _forward(layers, batch.inputs)
    logp = _log_softmax(logits)
    n = len(batch)
    per_sample = -logp[np.arange(n), batch.labels]

    grad = np.empty(spec.n_params)
    grad_layers = unpack(grad, spec)
    delta = np.exp(logp)
    delta[np.arange(n), batch.labels] -= 1.0
    delta /= n
    for idx in range(len(layers) - 1, -1, -1):
        gw, gb = grad_layers[idx]
        gw[...] = activations[idx].T @ delta
        gb[...] = delta.sum(axis=0)
        if idx:
            delta = (delta @ layers[idx][0].T) * (activations[idx] > 0.0)
    return per_sample, grad


def loss_and_grad(theta, spec, batch):
    """Mean cross-entropy over ``batch`` and its exact gradient w.r.t. ``theta``."""
    per_sample, grad = _loss_grad_and_samples(theta, spec, batch)
    value = float(np.mean(per_sample))
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite loss or gradient")
    return value, grad


@_quiet
def sgd_step(theta, grad, lr):
    if not lr > 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    theta = as_param_vector(theta)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise DimensionMismatchError("gradient and parameters differ in shape")
    return theta - lr * grad


def train_step_with_probe(theta, spec, new_batch, probe_batch=None, lr=DEFAULT_LR,
                          replay_batch=None):
    """One SGD step on ``new_batch`` plus a loss-only look at ``probe_batch``.

    The probe never touches the gradient. ``replay_batch``, when given, is
    concatenated to ``new_batch`` for the gradient (plain experience replay);
    ``new_loss`` is still reported over the new-task rows only.
    """
    grad_batch = new_batch if replay_batch is None else Batch.concat(new_batch, replay_batch)
    per_sample, grad = _loss_grad_and_samples(theta, spec, grad_batch)
    new_loss = float(np.mean(per_sample[:len(new_batch)]))
    if not np.isfinite(per_sample).all() or not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite loss or gradient")
    mem_loss = None
    if probe_batch is not None:
        mem_loss = loss(theta, spec, probe_batch)
    updated = sgd_step(theta, grad, lr)
    if not np.all(np.isfinite(updated)):
        raise DivergenceError("parameters became non-finite")
    return updated, StepReport(new_loss, mem_loss, float(np.linalg.norm(grad)))


def predict(theta, spec, inputs):
    return np.argmax(predict_logits(theta, spec, inputs), axis=1)


def evaluate_accuracy(theta, spec, inputs, labels):
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise ValidationError("cannot evaluate on an empty dataset")
    return float(np.mean(predict(theta, spec, inputs) == labels))
