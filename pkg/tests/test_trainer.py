import math

import numpy as np
import pytest

from aimmerge import trainer
from aimmerge.exceptions import DimensionMismatchError, DivergenceError, ValidationError
from aimmerge.trainer import Batch, ModelSpec


def numeric_grad(theta, spec, batch, h=1e-5):
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (trainer.loss(up, spec, batch) - trainer.loss(down, spec, batch)) / (2 * h)
    return grad


def random_problem(seed):
    rng = np.random.default_rng(seed)
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=rng.integers(1, 3)))
    spec = ModelSpec(input_dim=int(rng.integers(1, 5)), hidden_dims=hidden,
                     num_classes=int(rng.integers(2, 5)), seed=seed)
    theta = trainer.init_model(spec) + rng.normal(0, 0.1, size=spec.n_params)
    n = int(rng.integers(1, 7))
    batch = Batch(rng.normal(size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, size=n))
    return spec, theta, batch


def max_relative_error(analytic, numeric):
    scale = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / scale))


def test_param_count():
    assert ModelSpec(input_dim=2, hidden_dims=[3], num_classes=2).n_params == 17


def test_init_deterministic_with_zero_biases():
    spec = ModelSpec(input_dim=5, hidden_dims=(7, 4), num_classes=3, seed=11)
    a, b = trainer.init_model(spec), trainer.init_model(spec)
    np.testing.assert_array_equal(a, b)
    for w, bias in trainer.unpack(a, spec):
        assert np.all(bias == 0)
        limit = math.sqrt(6 / sum(w.shape))
        assert np.all(np.abs(w) <= limit)
    assert not np.array_equal(a, trainer.init_model(ModelSpec(5, (7, 4), 3, seed=12)))


def test_zero_logits_loss_is_ln2():
    spec = ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=2)
    batch = Batch.of(np.ones((5, 3)), [0, 1, 1, 0, 1])
    assert trainer.loss(np.zeros(spec.n_params), spec, batch) == pytest.approx(math.log(2), abs=1e-15)


def test_duplicated_batch_same_loss(rng):
    spec = ModelSpec(input_dim=3, hidden_dims=(4,), num_classes=3, seed=2)
    theta = trainer.init_model(spec)
    x = rng.normal(size=(1, 3))
    single = trainer.loss(theta, spec, Batch(x, np.array([2])))
    dup = trainer.loss(theta, spec, Batch(np.repeat(x, 4, axis=0), np.array([2] * 4)))
    assert dup == pytest.approx(single, rel=1e-14)


@pytest.mark.parametrize("seed", range(12))
def test_gradient_matches_finite_differences(seed):
    spec, theta, batch = random_problem(seed)
    _, grad = trainer.loss_and_grad(theta, spec, batch)
    assert max_relative_error(grad, numeric_grad(theta, spec, batch)) < 1e-4


def test_sgd_step():
    np.testing.assert_array_equal(trainer.sgd_step([1.0, 2.0], np.zeros(2), 0.1), [1.0, 2.0])
    np.testing.assert_array_equal(trainer.sgd_step([1.0], [2.0], 0.5), [0.0])
    with pytest.raises(ValidationError):
        trainer.sgd_step([1.0], [1.0], 0.0)


def test_sgd_step_decreases_loss_on_separable_toy():
    spec = ModelSpec(input_dim=2, hidden_dims=(), num_classes=2, seed=0)
    batch = Batch.of([[2.0, 0.0], [1.5, 0.5], [-2.0, 0.0], [-1.0, -0.5]], [0, 0, 1, 1])
    theta = trainer.init_model(spec)
    before, grad = trainer.loss_and_grad(theta, spec, batch)
    after = trainer.loss(trainer.sgd_step(theta, grad, 1e-2), spec, batch)
    assert after < before


def test_probe_is_side_effect_free(rng):
    spec = ModelSpec(input_dim=4, hidden_dims=(6,), num_classes=3, seed=5)
    theta = trainer.init_model(spec)
    new = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    probe = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    plain, rep_plain = trainer.train_step_with_probe(theta, spec, new, None, 0.1)
    probed, rep_probed = trainer.train_step_with_probe(theta, spec, new, probe, 0.1)
    assert rep_plain.mem_loss is None
    assert rep_probed.mem_loss is not None
    assert plain.tobytes() == probed.tobytes()
    _, grad = trainer.loss_and_grad(theta, spec, new)
    assert plain.tobytes() == trainer.sgd_step(theta, grad, 0.1).tobytes()
    _, same = trainer.train_step_with_probe(theta, spec, new, new, 0.1)
    assert same.mem_loss == pytest.approx(same.new_loss, abs=1e-12)


def test_replay_batch_joins_gradient(rng):
    spec = ModelSpec(input_dim=4, hidden_dims=(6,), num_classes=3, seed=5)
    theta = trainer.init_model(spec)
    new = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    mem = Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8))
    updated, report = trainer.train_step_with_probe(theta, spec, new, None, 0.1, replay_batch=mem)
    _, grad = trainer.loss_and_grad(theta, spec, Batch.concat(new, mem))
    np.testing.assert_array_equal(updated, theta - 0.1 * grad)
    assert report.new_loss == pytest.approx(trainer.loss(theta, spec, new), rel=1e-12)


def test_divergence_raises():
    spec = ModelSpec(input_dim=1, hidden_dims=(), num_classes=2)
    theta = np.array([np.inf, 0.0, 0.0, 0.0])
    with pytest.raises(DivergenceError):
        trainer.loss_and_grad(theta, spec, Batch.of([[1.0]], [0]))


def test_shape_errors():
    spec = ModelSpec(input_dim=2, hidden_dims=(3,), num_classes=2)
    with pytest.raises(DimensionMismatchError):
        trainer.loss(np.zeros(5), spec, Batch.of([[1.0, 2.0]], [0]))
    with pytest.raises(DimensionMismatchError):
        trainer.loss(np.zeros(17), spec, Batch.of([[1.0, 2.0, 3.0]], [0]))
    with pytest.raises(ValidationError):
        trainer.loss(np.zeros(17), spec, Batch.of([[1.0, 2.0]], [2]))


def test_evaluate_accuracy(rng):
    spec = ModelSpec(input_dim=2, hidden_dims=(), num_classes=2)
    # weights zero, bias favours class 1
    theta = np.array([0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
    x = rng.normal(size=(10, 2))
    assert trainer.evaluate_accuracy(theta, spec, x, np.ones(10, int)) == 1.0
    assert trainer.evaluate_accuracy(theta, spec, x, np.zeros(10, int)) == 0.0
    with pytest.raises(ValidationError):
        trainer.evaluate_accuracy(theta, spec, np.zeros((0, 2)), np.zeros(0, int))


def test_untrained_accuracy_near_chance():
    accs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        spec = ModelSpec(input_dim=8, hidden_dims=(16,), num_classes=4, seed=seed)
        x = rng.normal(size=(100, 8))
        y = rng.integers(0, 4, size=100)
        accs.append(trainer.evaluate_accuracy(trainer.init_model(spec), spec, x, y))
    assert abs(np.mean(accs) - 0.25) < 0.15


def test_training_deterministic(rng):
    spec = ModelSpec(input_dim=4, hidden_dims=(6,), num_classes=3, seed=3)
    batches = [Batch(rng.normal(size=(8, 4)), rng.integers(0, 3, 8)) for _ in range(20)]

    def run():
        theta = trainer.init_model(spec)
        losses = []
        for b in batches:
            theta, rep = trainer.train_step_with_probe(theta, spec, b, None, 0.05)
            losses.append(rep.new_loss)
        return losses, theta

    (l1, t1), (l2, t2) = run(), run()
    assert l1 == l2
    assert t1.tobytes() == t2.tobytes()
