import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimmerge import trainer
from aimmerge.fusion import MergeSignals, execute_merge, fusion_weights, rehearsal_finetune
from aimmerge.param_space import apply_merge
from aimmerge.tasks import MemoryBuffer, SequenceSpec, generate_sequence, store_memory
from aimmerge.trainer import ModelSpec


@pytest.fixture
def setup():
    tasks = generate_sequence(SequenceSpec(num_tasks=2, input_dim=4, classes_per_task=3,
                                           samples_per_task=60, test_samples_per_task=10))
    spec = ModelSpec(input_dim=4, hidden_dims=(5,), num_classes=3, seed=1)
    buf = store_memory(MemoryBuffer(0.2), tasks[0], 0.2, np.random.default_rng(0))
    anchor = trainer.init_model(spec)
    theta_j = anchor + np.random.default_rng(2).normal(0, 0.1, size=spec.n_params)
    return spec, buf, anchor, theta_j


@pytest.mark.parametrize("n_up, l_w, f, f_max, expected", [
    (2, 3, 1, 3, (2 / 3, 1 / 3)),
    (3, 3, 3, 3, (0.5, 0.5)),
    (0, 3, 0, 3, (1.0, 0.0)),
    (0, 3, 2, 3, (0.0, 1.0)),
])
def test_fusion_weights(n_up, l_w, f, f_max, expected):
    assert fusion_weights(n_up, l_w, f, f_max) == pytest.approx(expected, abs=1e-15)


@given(st.integers(1, 8).flatmap(lambda l: st.tuples(st.just(l), st.integers(0, l))),
       st.integers(1, 8).flatmap(lambda m: st.tuples(st.just(m), st.integers(0, m))))
def test_fusion_weights_normalised(lw_up, fmax_f):
    l_w, n_up = lw_up
    f_max, f = fmax_f
    a1, a2 = fusion_weights(n_up, l_w, f, f_max)
    assert 0 <= a1 <= 1 and 0 <= a2 <= 1
    assert a1 + a2 == 1.0


def test_rehearsal_finetune_degenerate(setup):
    spec, buf, _, theta_j = setup
    original = theta_j.copy()
    assert np.array_equal(rehearsal_finetune(theta_j, spec, buf, 0, 0.1, np.random.default_rng(0)), theta_j)
    assert np.array_equal(rehearsal_finetune(theta_j, spec, MemoryBuffer(), 5, 0.1, np.random.default_rng(0)), theta_j)
    tiny = rehearsal_finetune(theta_j, spec, buf, 5, 1e-30, np.random.default_rng(0))
    np.testing.assert_allclose(tiny, theta_j, rtol=0, atol=1e-12)
    moved = rehearsal_finetune(theta_j, spec, buf, 5, 0.1, np.random.default_rng(0))
    assert not np.allclose(moved, theta_j)
    assert np.array_equal(theta_j, original)


def test_empty_memory_merge_is_noop(setup):
    spec, _, anchor, theta_j = setup
    theta_hat, event = execute_merge(anchor, theta_j, spec, MemoryBuffer(), MergeSignals(2, 3, 1, 3, 8),
                                     0.1, np.random.default_rng(0))
    np.testing.assert_allclose(theta_hat, theta_j, rtol=0, atol=1e-12)
    assert (event.alpha1, event.alpha2, event.rehearsal_steps) == (1.0, 0.0, 0)
    assert event.mem_loss_before is None


def test_alpha_one_zero_returns_theta_j(setup):
    spec, buf, anchor, theta_j = setup
    theta_hat, event = execute_merge(anchor, theta_j, spec, buf, MergeSignals(3, 3, 0, 3, 8),
                                     0.1, np.random.default_rng(0))
    assert (event.alpha1, event.alpha2) == (1.0, 0.0)
    np.testing.assert_allclose(theta_hat, theta_j, rtol=0, atol=1e-12)


def test_merge_matches_fusion_algebra(setup):
    spec, buf, anchor, theta_j = setup
    signals = MergeSignals(2, 3, 1, 3, 9, "scheduled")
    buf_before = {k: b.inputs.copy() for k, b in buf.per_task.items()}
    theta_j_before = theta_j.copy()
    theta_hat, event = execute_merge(anchor, theta_j, spec, buf, signals, 0.1, np.random.default_rng(7))
    # replay the same rng draws: probe first, then the rehearsal batches
    rng = np.random.default_rng(7)
    from aimmerge.tasks import sample_probe
    sample_probe(buf, trainer.DEFAULT_BATCH_SIZE, rng)
    theta_mem = rehearsal_finetune(theta_j, spec, buf, 5, 0.1, rng)
    expected = anchor + (2 / 3) * (theta_j - anchor) + (1 / 3) * (theta_mem - theta_j)
    np.testing.assert_allclose(theta_hat, expected, rtol=0, atol=1e-12)
    assert event.rehearsal_steps == 5
    assert event.alpha1 + event.alpha2 == 1.0
    assert event.lambda_value == pytest.approx(np.abs(theta_j - anchor).sum() / 9)
    assert event.mem_loss_before is not None and event.mem_loss_after is not None
    assert np.array_equal(theta_j, theta_j_before)
    for k, x in buf_before.items():
        assert np.array_equal(buf.per_task[k].inputs, x)


def test_two_parameter_fusion_by_hand():
    np.testing.assert_array_equal(
        apply_merge([0.0, 0.0], np.array([2.0, 0.0]), np.array([2.0, 4.0]) - np.array([2.0, 0.0]), 0.5, 0.5),
        [1.0, 2.0])


def test_fixed_alpha_overrides_signals(setup):
    spec, buf, anchor, theta_j = setup
    _, event = execute_merge(anchor, theta_j, spec, buf, MergeSignals(3, 3, 0, 3, 4),
                             0.1, np.random.default_rng(0), fixed_alpha=(0.3, 0.7))
    assert (event.alpha1, event.alpha2) == (0.3, 0.7)
