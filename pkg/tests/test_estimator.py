import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from aimmerge import ContinualMergeClassifier, SequenceSpec, generate_sequence
from aimmerge.exceptions import ConfigError


@pytest.fixture(scope="module")
def tasks():
    return generate_sequence(SequenceSpec(num_tasks=2, input_dim=6, classes_per_task=3,
                                          samples_per_task=90, test_samples_per_task=30))


def test_params_round_trip():
    est = ContinualMergeClassifier(strategy="fixed_interval", fixed_interval=4, lr=0.1)
    params = est.get_params()
    assert params["strategy"] == "fixed_interval" and params["fixed_interval"] == 4
    twin = clone(est)
    assert twin.get_params() == params
    twin.set_params(strategy="replay")
    assert est.strategy == "fixed_interval"


def test_unfitted_predict_raises():
    with pytest.raises(NotFittedError):
        ContinualMergeClassifier().predict(np.zeros((1, 3)))


def test_bad_strategy():
    with pytest.raises(ConfigError):
        ContinualMergeClassifier(strategy="magic").fit(np.zeros((4, 2)), [0, 1, 0, 1])


def test_fit_predict_in_pipeline(tasks):
    t = tasks[0]
    y = np.array(["a", "b", "c"])[t.train.labels]
    pipe = make_pipeline(StandardScaler(), ContinualMergeClassifier(lr=0.05, epochs=5))
    pipe.fit(t.train.inputs, y)
    pred = pipe.predict(t.test.inputs)
    assert set(pred) <= {"a", "b", "c"}
    assert pipe.score(t.test.inputs, np.array(["a", "b", "c"])[t.test.labels]) > 0.8
    proba = pipe.predict_proba(t.test.inputs)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)


def test_partial_fit_needs_consistent_features(tasks):
    est = ContinualMergeClassifier(lr=0.05, epochs=1)
    est.partial_fit(tasks[0].train.inputs, tasks[0].train.labels, classes=range(3))
    with pytest.raises(ValueError):
        est.partial_fit(tasks[1].train.inputs[:, :4], tasks[1].train.labels)
    with pytest.raises(ValueError):
        est.partial_fit(tasks[1].train.inputs, tasks[1].train.labels + 5)


def test_same_random_state_same_model(tasks):
    def run():
        est = ContinualMergeClassifier(lr=0.05, epochs=2, random_state=3, memory_fraction=0.1)
        for t in tasks:
            est.partial_fit(t.train.inputs, t.train.labels, classes=range(3))
        return est
    a, b = run(), run()
    assert a.params_.tobytes() == b.params_.tobytes()
    assert [e.to_dict() for e in a.merge_events_] == [e.to_dict() for e in b.merge_events_]


def test_first_task_aim_equals_sequential(tasks):
    t = tasks[0]
    aim = ContinualMergeClassifier(strategy="aim", lr=0.05, epochs=3).partial_fit(
        t.train.inputs, t.train.labels, classes=range(3))
    seq = ContinualMergeClassifier(strategy="sequential", lr=0.05, epochs=3).partial_fit(
        t.train.inputs, t.train.labels, classes=range(3))
    assert aim.merge_events_
    assert all((e.alpha1, e.alpha2) == (1.0, 0.0) for e in aim.merge_events_)
    np.testing.assert_allclose(aim.params_, seq.params_, rtol=0, atol=1e-12)


def test_memory_grows_per_task(tasks):
    est = ContinualMergeClassifier(lr=0.05, epochs=1, memory_fraction=0.02)
    for k, t in enumerate(tasks, start=1):
        est.partial_fit(t.train.inputs, t.train.labels, classes=range(3))
        assert sorted(est.memory_.per_task) == list(range(1, k + 1))
        assert all(len(b) == 2 for b in est.memory_.per_task.values())
    assert ContinualMergeClassifier(strategy="sequential").fit(
        tasks[0].train.inputs, tasks[0].train.labels).memory_ is None


@pytest.mark.parametrize("strategy", ["replay", "sequential"])
def test_non_merging_strategies_never_merge(tasks, strategy):
    est = ContinualMergeClassifier(strategy=strategy, lr=0.05, epochs=2)
    for t in tasks:
        est.partial_fit(t.train.inputs, t.train.labels, classes=range(3))
    assert est.merge_events_ == []
    assert not any(r["type"] == "merge" for r in est.trajectory_)


def test_single_merge_once_per_task(tasks):
    est = ContinualMergeClassifier(strategy="single_merge", alpha1=0.7, lr=0.05, epochs=2)
    for t in tasks:
        est.partial_fit(t.train.inputs, t.train.labels, classes=range(3))
    assert [e.task_id for e in est.merge_events_] == [1, 2]
    second = est.merge_events_[1]
    assert (second.alpha1, second.alpha2) == (0.7, pytest.approx(0.3))
    assert second.actual_interval == est.iterations_per_task(90)
    assert second.rehearsal_steps == -(-second.actual_interval // 2)


def test_fixed_interval_merge_count(tasks):
    est = ContinualMergeClassifier(strategy="fixed_interval", fixed_interval=8, lr=0.05, epochs=3)
    for t in tasks:
        est.partial_fit(t.train.inputs, t.train.labels, classes=range(3))
    per_task = est.iterations_per_task(90) // 8
    assert [sum(e.task_id == k for e in est.merge_events_) for k in (1, 2)] == [per_task, per_task]


def test_reset_controller_per_task(tasks):
    kwargs = dict(lr=0.05, epochs=3, random_state=1)
    carry = ContinualMergeClassifier(**kwargs)
    reset = ContinualMergeClassifier(reset_controller_per_task=True, **kwargs)
    for est in (carry, reset):
        est.partial_fit(tasks[0].train.inputs, tasks[0].train.labels, classes=range(3))
    assert len(carry.controller_.state.lambda_history) == len(reset.controller_.state.lambda_history) > 0
    for est in (carry, reset):
        est.controller_.start_task(reset=est.reset_controller_per_task)
    assert reset.controller_.state.lambda_history == []
    assert carry.controller_.state.lambda_history
