"""scikit-learn compatible continual learner.

:class:`ContinualMergeClassifier` trains the small dense network one task at
a time through :meth:`~ContinualMergeClassifier.partial_fit`. The
``strategy`` parameter selects the adaptive merging method, one of its
ablations, or a baseline:

``aim``             adaptive merge controller + rehearsal-based fusion
``aim_no_ls``       interval fixed at ``s_init``; forgetting signal still times merges
``aim_no_fs``       interval adapted by the learning signal; merges exactly on schedule
``aim_mgm``         adaptive schedule, constant fusion weights ``(alpha1, 1 - alpha1)``
``fixed_interval``  a merge every ``fixed_interval`` steps with signal-derived weights
``single_merge``    one merge per task, at its end, with constant weights
``replay``          no merging; memory rows join every gradient batch 1:1
``sequential``      no memory, no merging
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import trainer
from .controller import ControllerConfig, MergeController
from .exceptions import ConfigError, DivergenceError
from .fusion import MergeSignals, execute_merge
from .tasks import MemoryBuffer, TaskDataset, sample_probe, store_memory
from .trainer import Batch, ModelSpec

STRATEGIES = ("aim", "aim_no_ls", "aim_no_fs", "aim_mgm", "fixed_interval",
              "single_merge", "replay", "sequential")
_CONTROLLED = ("aim", "aim_no_ls", "aim_no_fs", "aim_mgm", "fixed_interval")


def controller_config_for(strategy, s_init=8, l_w=3, s_min=2, s_max=128, gamma_forget=2.0,
                          f_max=3, fixed_interval=8):
    """Controller settings implementing ``strategy``; None when it does not merge adaptively."""
    common = dict(l_w=l_w, s_min=s_min, s_max=s_max, gamma_forget=gamma_forget, f_max=f_max)
    if strategy in ("aim", "aim_mgm"):
        return ControllerConfig(s_init=s_init, **common)
    if strategy == "aim_no_ls":
        return ControllerConfig(s_init=s_init, adapt_interval=False, **common)
    if strategy == "aim_no_fs":
        return ControllerConfig(s_init=s_init, forgetting_timing=False,
                                track_forgetting=False, **common)
    if strategy == "fixed_interval":
        common.update(s_min=min(s_min, fixed_interval), s_max=max(s_max, fixed_interval))
        return ControllerConfig(s_init=fixed_interval, adapt_interval=False,
                                forgetting_timing=False, **common)
    return None


class ContinualMergeClassifier(ClassifierMixin, BaseEstimator):
    """Dense ReLU classifier learned over a sequence of tasks.

    Parameters
    ----------
    strategy : str, default="aim"
        Training strategy, see the module docstring.
    hidden_dims : tuple of int, default=(32,)
        Hidden layer widths.
    lr : float, default=3e-4
        SGD learning rate, used for rehearsal fine-tuning too.
    batch_size : int, default=8
        New-task rows per step; memory probes and replay batches use the same size.
    epochs : int, default=5
        Passes over each task's training set.
    memory_fraction : float, default=0.02
        Share of each finished task's training set kept for rehearsal.
    s_init, l_w, s_min, s_max, gamma_forget, f_max
        Merge controller settings.
    alpha1 : float, default=0.5
        New-knowledge weight for ``aim_mgm`` and ``single_merge``; the
        historical weight is ``1 - alpha1``.
    fixed_interval : int, default=8
        Merge period for ``fixed_interval``.
    reset_controller_per_task : bool, default=False
        Start every task with a fresh controller instead of carrying the
        learning-signal history and interval over.
    record_trajectory : bool, default=True
        Keep one record per iteration in ``trajectory_``.
    random_state : int, default=0

    Attributes
    ----------
    params_ : ndarray of shape (n_params,)
        Current flat parameter vector.
    init_params_ : ndarray
        Parameters before any training.
    model_spec_ : ModelSpec
    classes_ : ndarray
    memory_ : MemoryBuffer or None
    controller_ : MergeController or None
    merge_events_ : list of MergeEvent
    trajectory_ : list of dict
        Iteration, merge and controller records in the order they happened.
    n_tasks_seen_ : int
    """

    def __init__(self, strategy="aim", hidden_dims=(32,), lr=trainer.DEFAULT_LR,
                 batch_size=trainer.DEFAULT_BATCH_SIZE, epochs=5, memory_fraction=0.02,
                 s_init=8, l_w=3, s_min=2, s_max=128, gamma_forget=2.0, f_max=3,
                 alpha1=0.5, fixed_interval=8, reset_controller_per_task=False,
                 record_trajectory=True, random_state=0):
        self.strategy = strategy
        self.hidden_dims = hidden_dims
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.memory_fraction = memory_fraction
        self.s_init = s_init
        self.l_w = l_w
        self.s_min = s_min
        self.s_max = s_max
        self.gamma_forget = gamma_forget
        self.f_max = f_max
        self.alpha1 = alpha1
        self.fixed_interval = fixed_interval
        self.reset_controller_per_task = reset_controller_per_task
        self.record_trajectory = record_trajectory
        self.random_state = random_state

    def _validate_params(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if not 0 < self.memory_fraction <= 1:
            raise ConfigError("memory_fraction must lie in (0, 1]")
        if not 0 <= self.alpha1 <= 1:
            raise ConfigError("alpha1 must lie in [0, 1]")
        if self.fixed_interval < 1:
            raise ConfigError("fixed_interval must be >= 1")

    def _controller_config(self):
        return controller_config_for(self.strategy, self.s_init, self.l_w, self.s_min, self.s_max,
                                     self.gamma_forget, self.f_max, self.fixed_interval)

    @property
    def uses_memory(self):
        return self.strategy != "sequential"

    def _fixed_alpha(self):
        if self.strategy in ("aim_mgm", "single_merge"):
            return (self.alpha1, 1.0 - self.alpha1)
        return None

    def _initialize(self, n_features, classes):
        self._validate_params()
        seeds = np.random.SeedSequence(self.random_state).spawn(6)
        self.classes_ = np.asarray(classes)
        self.model_spec_ = ModelSpec(
            input_dim=n_features, hidden_dims=tuple(self.hidden_dims),
            num_classes=len(self.classes_), seed=int(seeds[0].generate_state(1)[0]))
        self.params_ = trainer.init_model(self.model_spec_)
        self.init_params_ = self.params_.copy()
        self._shuffle_rng = np.random.default_rng(seeds[1])
        self._probe_rng = np.random.default_rng(seeds[2])
        self._memory_rng = np.random.default_rng(seeds[3])
        self._merge_rng = np.random.default_rng(seeds[4])
        self._replay_rng = np.random.default_rng(seeds[5])
        self.memory_ = MemoryBuffer(self.memory_fraction) if self.uses_memory else None
        cfg = self._controller_config()
        self.controller_ = MergeController(cfg) if cfg is not None else None
        self.merge_events_ = []
        self.trajectory_ = []
        self.n_tasks_seen_ = 0
        self.n_iter_ = 0
        self.n_features_in_ = n_features

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise ValueError("y contains labels not seen in `classes`")
        return idx

    def fit(self, X, y):
        """Forget everything and train on ``(X, y)`` as a single task."""
        for attr in ("params_", "classes_"):
            if hasattr(self, attr):
                delattr(self, attr)
        return self.partial_fit(X, y)

    def partial_fit(self, X, y, classes=None, task_id=None):
        """Train on one new task.

        ``classes`` must list the full label space on the first call unless
        ``y`` already contains every label.
        """
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        if not hasattr(self, "params_"):
            self._initialize(X.shape[1], np.unique(y) if classes is None else np.unique(classes))
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        task_id = self.n_tasks_seen_ + 1 if task_id is None else int(task_id)
        labels = self._encode(y)
        self._train_task(Batch(X, labels), task_id)
        if self.memory_ is not None:
            task = TaskDataset(task_id, Batch(X, labels), Batch(X, labels))
            store_memory(self.memory_, task, self.memory_fraction, self._memory_rng)
        self.n_tasks_seen_ += 1
        return self

    def iterations_per_task(self, n_samples):
        return self.epochs * math.ceil(n_samples / self.batch_size)

    def _train_task(self, data, task_id):
        spec = self.model_spec_
        ctrl = self.controller_
        if ctrl is not None:
            ctrl.start_task(reset=self.reset_controller_per_task and self.n_tasks_seen_ > 0)
            ctrl.events.clear()
        theta = self.params_
        anchor = theta.copy()
        since_anchor = 0
        n = len(data)
        bs = self.batch_size
        probing = self.memory_ is not None and self.strategy != "sequential"
        it = 0
        for _epoch in range(self.epochs):
            order = self._shuffle_rng.permutation(n)
            for start in range(0, n, bs):
                rows = order[start:start + bs]
                batch = Batch(data.inputs[rows], data.labels[rows])
                probe = sample_probe(self.memory_, bs, self._probe_rng) if probing else None
                replay = None
                if self.strategy == "replay":
                    replay = sample_probe(self.memory_, bs, self._replay_rng)
                it += 1
                self.n_iter_ += 1
                since_anchor += 1
                try:
                    theta, report = trainer.train_step_with_probe(
                        theta, spec, batch, probe, self.lr, replay_batch=replay)
                except DivergenceError as exc:
                    exc.context.update(task_id=task_id, iter_in_task=it, global_iter=self.n_iter_)
                    raise
                mem_loss = report.mem_loss
                decision = ctrl.observe(mem_loss) if ctrl is not None else None
                if ctrl is not None:
                    self._flush_controller_events(task_id)
                if self.record_trajectory:
                    st = ctrl.state if ctrl is not None else None
                    self.trajectory_.append({
                        "type": "iter", "task_id": task_id, "global_iter": self.n_iter_,
                        "iter_in_task": it, "new_loss": report.new_loss, "mem_loss": mem_loss,
                        "grad_norm": report.grad_norm,
                        "steps_since_merge": since_anchor,
                        "phase": None if st is None else st.phase.value,
                        "f_count": None if st is None else st.f_count,
                        "s_current": None if st is None else st.s_current,
                        "cold_start": None if st is None else st.in_cold_start(ctrl.config),
                    })
                if decision is not None and decision.merge:
                    theta = self._merge(anchor, theta, decision.actual_interval,
                                        decision.reason.value, task_id, it)
                    anchor = theta.copy()
                    since_anchor = 0
        if self.strategy == "single_merge":
            theta = self._merge(anchor, theta, since_anchor, "task_end", task_id, it)
        self.params_ = theta

    def _flush_controller_events(self, task_id):
        if self.record_trajectory:
            for ev in self.controller_.events:
                self.trajectory_.append({"type": "controller", "task_id": task_id, **ev})
        self.controller_.events.clear()

    def _merge(self, anchor, theta, actual_interval, reason, task_id, it):
        ctrl = self.controller_
        spec = self.model_spec_
        lam = float(np.sum(np.abs(theta - anchor)) / actual_interval)
        if ctrl is not None:
            tr = ctrl.preview_trend(lam)
            signals = MergeSignals(tr.n_up, ctrl.config.l_w, ctrl.state.f_count,
                                   ctrl.config.f_max, actual_interval, reason)
        else:
            signals = MergeSignals(0, self.l_w, 0, self.f_max, actual_interval, reason)
        try:
            theta_hat, event = execute_merge(
                anchor, theta, spec, self.memory_, signals, self.lr, self._merge_rng,
                batch_size=self.batch_size, fixed_alpha=self._fixed_alpha(),
                merge_index=len(self.merge_events_) + 1, task_id=task_id, iteration=self.n_iter_)
        except DivergenceError as exc:
            exc.context.update(task_id=task_id, iter_in_task=it, global_iter=self.n_iter_, phase="merge")
            raise
        if ctrl is not None:
            ctrl.merged(event.lambda_value)
            self._flush_controller_events(task_id)
        self.merge_events_.append(event)
        if self.record_trajectory:
            self.trajectory_.append({"type": "merge", **event.to_dict()})
        return theta_hat

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return trainer.predict_logits(self.params_, self.model_spec_, X)

    def predict_proba(self, X):
        logits = self.decision_function(X)
        logits = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def task_accuracy(self, X, y):
        """Accuracy on encoded-or-raw labels ``y``; same as :meth:`score`."""
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return trainer.evaluate_accuracy(self.params_, self.model_spec_, X, self._encode(np.asarray(y)))
