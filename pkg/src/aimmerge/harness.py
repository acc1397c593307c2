"""Experiment orchestration: configs, task-sequence runs, suites and report files."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import os
import re
import statistics
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimator import STRATEGIES, ContinualMergeClassifier
from .exceptions import ConfigError, DivergenceError
from .metrics import AccuracyMatrix, report
from .tasks import SequenceSpec, generate_sequence

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SEED_ENV = "AIMMERGE_SEED"

METRICS_COLUMNS = ["run_id", "seed", "strategy", "OP", "BWT", "FWT", "merge_count"]
SUMMARY_COLUMNS = ["strategy", "n_runs", "OP_mean", "OP_std", "BWT_mean", "BWT_std",
                   "FWT_mean", "FWT_std", "merge_count_mean"]
MERGE_COLUMNS = ["run_id", "seed", "strategy", "merge_index", "task_id", "iteration",
                 "actual_interval", "reason", "lambda_value", "n_up", "l_w_used",
                 "f_count_at_merge", "alpha1", "alpha2", "mem_loss_before", "mem_loss_after",
                 "rehearsal_steps"]

# ranges explored by the hyperparameter sensitivity study; outside them we only warn
SENSITIVITY_RANGES = {"s_init": (2, 32), "l_w": (2, 8), "gamma_forget": (2, 32), "f_max": (2, 8)}

_ALIASES = {
    "aim": "aim", "aimmerging": "aim",
    "aimnols": "aim_no_ls", "aim_no_ls": "aim_no_ls",
    "aimnofs": "aim_no_fs", "aim_no_fs": "aim_no_fs",
    "aimmgm": "aim_mgm", "aim_mgm": "aim_mgm",
    "fixedinterval": "fixed_interval", "fixed_interval": "fixed_interval",
    "singlemergeendoftask": "single_merge", "single_merge": "single_merge",
    "replayonly": "replay", "replay": "replay",
    "sequential": "sequential",
}
_STRATEGY_RE = re.compile(r"^\s*([A-Za-z_]+)\s*(?:\(\s*([0-9.eE+-]+)\s*\))?\s*$")


@dataclass(frozen=True)
class StrategySpec:
    name: str
    # alpha1 for aim_mgm / single_merge, the interval for fixed_interval
    arg: float | None = None

    @classmethod
    def parse(cls, text):
        if isinstance(text, StrategySpec):
            return text
        if isinstance(text, dict):
            return cls.parse(text["name"]) if "arg" not in text else cls(
                _canonical(text["name"]), text["arg"])
        m = _STRATEGY_RE.match(str(text))
        if not m:
            raise ConfigError(f"cannot parse strategy {text!r}")
        name = _canonical(m.group(1))
        arg = None if m.group(2) is None else float(m.group(2))
        if name == "fixed_interval":
            arg = 8 if arg is None else arg
            if arg != int(arg) or arg < 1:
                raise ConfigError("FixedInterval needs a positive integer interval")
            arg = int(arg)
        elif name in ("aim_mgm", "single_merge"):
            arg = 0.5 if arg is None else arg
            if not 0 <= arg <= 1:
                raise ConfigError("alpha1 must lie in [0, 1]")
        elif arg is not None:
            raise ConfigError(f"strategy {name} takes no argument")
        return cls(name, arg)

    @property
    def label(self):
        if self.arg is None:
            return self.name
        return f"{self.name}({self.arg:g})"

    @property
    def slug(self):
        return self.label.replace("(", "_").replace(")", "")

    def estimator_params(self):
        params = {"strategy": self.name}
        if self.name == "fixed_interval":
            params["fixed_interval"] = int(self.arg)
        elif self.name in ("aim_mgm", "single_merge"):
            params["alpha1"] = float(self.arg)
        return params


def _canonical(name):
    key = name.strip().lower()
    if key not in _ALIASES:
        raise ConfigError(f"unknown strategy {name!r}; known: {sorted(set(_ALIASES.values()))}")
    return _ALIASES[key]


@dataclass
class ExperimentConfig:
    sequence: SequenceSpec = field(default_factory=SequenceSpec)
    hidden_dims: tuple = (32,)
    controller: dict = field(default_factory=dict)
    strategies: list = field(default_factory=lambda: ["aim"])
    lr: float = 0.02
    batch_size: int = 8
    epochs_per_task: int = 5
    memory_fraction: float = 0.02
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    output_dir: str = "runs"
    reset_controller_per_task: bool = False
    n_jobs: int = 1
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if isinstance(self.sequence, dict):
            try:
                self.sequence = SequenceSpec(**self.sequence)
            except TypeError as exc:
                raise ConfigError(f"bad sequence section: {exc}") from None
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if isinstance(self.strategies, (str, dict)):
            self.strategies = [self.strategies]
        self.strategies = [StrategySpec.parse(s) for s in self.strategies]
        if not self.strategies:
            raise ConfigError("at least one strategy is required")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        unknown = set(self.controller) - {"s_init", "l_w", "s_min", "s_max", "gamma_forget", "f_max"}
        if unknown:
            raise ConfigError(f"unknown controller keys {sorted(unknown)}")
        for key, (lo, hi) in SENSITIVITY_RANGES.items():
            if key in self.controller and not lo <= self.controller[key] <= hi:
                warnings.warn(f"controller {key}={self.controller[key]} lies outside the "
                              f"explored range [{lo}, {hi}]", stacklevel=2)
        for strategy in self.strategies:
            est = self.make_estimator(strategy, 0)
            est._validate_params()
            est._controller_config()

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "strategy" in data:
            if "strategies" in data:
                raise ConfigError("give either 'strategy' or 'strategies', not both")
            data["strategies"] = [data.pop("strategy")]
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        config = cls.from_dict(data)
        env = os.environ.get(SEED_ENV)
        if env:
            try:
                config.seeds = [int(s) for s in env.split(",") if s.strip()]
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be a comma-separated list of ints") from None
        return config

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "sequence": dataclasses.asdict(self.sequence),
            "hidden_dims": list(self.hidden_dims),
            "controller": dict(self.controller),
            "strategies": [s.label for s in self.strategies],
            "lr": self.lr,
            "batch_size": self.batch_size,
            "epochs_per_task": self.epochs_per_task,
            "memory_fraction": self.memory_fraction,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "reset_controller_per_task": self.reset_controller_per_task,
            "n_jobs": self.n_jobs,
        }

    def make_estimator(self, strategy, seed):
        strategy = StrategySpec.parse(strategy)
        return ContinualMergeClassifier(
            hidden_dims=self.hidden_dims, lr=self.lr, batch_size=self.batch_size,
            epochs=self.epochs_per_task, memory_fraction=self.memory_fraction,
            reset_controller_per_task=self.reset_controller_per_task, random_state=seed,
            **self.controller, **strategy.estimator_params())

    def sequence_for(self, seed):
        return dataclasses.replace(self.sequence, seed=self.sequence.seed + seed)


@dataclass
class RunResult:
    run_id: str
    seed: int
    strategy: str
    metrics: object
    accuracy_matrix: AccuracyMatrix
    merge_count: int
    wall_time: float
    trajectory: list = field(default_factory=list)
    merge_events: list = field(default_factory=list)


def individual_accuracies(config, seed, tasks=None):
    """Accuracy on each task of a fresh model trained on that task alone."""
    tasks = tasks if tasks is not None else generate_sequence(config.sequence_for(seed))
    n_classes = config.sequence.classes_per_task
    a0 = []
    for task in tasks:
        est = config.make_estimator("sequential", seed)
        est.set_params(record_trajectory=False)
        est.partial_fit(task.train.inputs, task.train.labels, classes=range(n_classes))
        a0.append(est.task_accuracy(task.test.inputs, task.test.labels))
    return np.array(a0)


def run_task_sequence(config, seed, strategy=None, a0=None):
    """Train one strategy through the whole task sequence for one seed."""
    strategy = StrategySpec.parse(strategy if strategy is not None else config.strategies[0])
    run_id = f"{strategy.slug}-s{seed}"
    start = time.perf_counter()
    tasks = generate_sequence(config.sequence_for(seed))
    n_classes = config.sequence.classes_per_task
    est = config.make_estimator(strategy, seed)
    matrix = AccuracyMatrix.empty(len(tasks))
    trajectory = []
    consumed = 0
    for k, task in enumerate(tasks):
        try:
            est.partial_fit(task.train.inputs, task.train.labels, classes=range(n_classes),
                            task_id=task.task_id)
        except DivergenceError as exc:
            exc.context.update(run_id=run_id, seed=seed, strategy=strategy.label)
            raise
        row = [est.task_accuracy(t.test.inputs, t.test.labels) for t in tasks[:k + 1]]
        matrix.a[:k + 1, k] = row
        for rec in est.trajectory_[consumed:]:
            trajectory.append({"run_id": run_id, "seed": seed, **rec})
        consumed = len(est.trajectory_)
        trajectory.append({"run_id": run_id, "seed": seed, "type": "task_boundary",
                           "task_id": task.task_id, "accuracy_row": row})
    matrix.a0 = individual_accuracies(config, seed, tasks) if a0 is None else np.asarray(a0)
    return RunResult(
        run_id=run_id, seed=seed, strategy=strategy.label, metrics=report(matrix),
        accuracy_matrix=matrix, merge_count=len(est.merge_events_),
        wall_time=time.perf_counter() - start, trajectory=trajectory,
        merge_events=list(est.merge_events_))


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    mean = math.fsum(values) / len(values)
    std = statistics.pstdev(values) if len(values) > 1 else 0.0
    return mean, std


def summarize(results):
    """Mean and population stddev of OP/BWT/FWT per strategy, in first-seen order."""
    by_strategy = {}
    for r in results:
        by_strategy.setdefault(r.strategy, []).append(r)
    rows = []
    for strategy, runs in by_strategy.items():
        row = {"strategy": strategy, "n_runs": len(runs)}
        for key, attr in (("OP", "op"), ("BWT", "bwt"), ("FWT", "fwt")):
            row[f"{key}_mean"], row[f"{key}_std"] = _mean_std([getattr(r.metrics, attr) for r in runs])
        row["merge_count_mean"] = math.fsum(r.merge_count for r in runs) / len(runs)
        rows.append(row)
    return rows


@dataclass
class SuiteReport:
    results: list
    summary: list
    config: ExperimentConfig
    partial: bool = False
    errors: list = field(default_factory=list)

    def summary_for(self, strategy):
        label = StrategySpec.parse(strategy).label
        for row in self.summary:
            if row["strategy"] == label:
                return row
        raise KeyError(label)


def _baseline(config, seed):
    try:
        return individual_accuracies(config, seed)
    except DivergenceError as exc:
        exc.context.update(seed=seed, strategy="individual_baseline")
        return exc


def run_suite(config, raise_on_error=True):
    """Every (strategy, seed) pair of ``config``; a0 is computed once per seed."""
    a0_by_seed = {seed: _baseline(config, seed) for seed in dict.fromkeys(config.seeds)}
    jobs = [(seed, s) for s in config.strategies for seed in config.seeds]
    results, errors = [], []
    if config.n_jobs != 1 and len(jobs) > 1:
        from joblib import Parallel, delayed
        outputs = Parallel(n_jobs=config.n_jobs)(
            delayed(_safe_run)(config, seed, s, a0_by_seed[seed]) for seed, s in jobs)
    else:
        outputs = [_safe_run(config, seed, s, a0_by_seed[seed]) for seed, s in jobs]
    for out in outputs:
        if isinstance(out, DivergenceError):
            if raise_on_error:
                raise out
            errors.append(out.to_record())
        else:
            results.append(out)
    return SuiteReport(results, summarize(results), config, partial=bool(errors), errors=errors)


def _safe_run(config, seed, strategy, a0):
    if isinstance(a0, DivergenceError):
        return a0
    try:
        return run_task_sequence(config, seed, strategy, a0=a0)
    except DivergenceError as exc:
        return exc


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path, columns, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    _write_text(path, buf.getvalue())


def _write_text(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.bool_):
        return bool(value)
    raise TypeError(f"not JSON serializable: {type(value)}")


def emit_reports(results, output_dir, config=None, errors=()):
    """Write trajectories, metrics.csv, summary.csv, merges.csv and config.json."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r in results:
        run_dir = out / r.run_id
        run_dir.mkdir(exist_ok=True)
        lines = [json.dumps(rec, sort_keys=True, default=_jsonable) for rec in r.trajectory]
        path = run_dir / "trajectory.jsonl"
        _write_text(path, "".join(line + "\n" for line in lines))
        written.append(path)

    metric_rows = [{"run_id": r.run_id, "seed": r.seed, "strategy": r.strategy,
                    "OP": r.metrics.op, "BWT": r.metrics.bwt, "FWT": r.metrics.fwt,
                    "merge_count": r.merge_count} for r in results]
    _write_csv(out / "metrics.csv", METRICS_COLUMNS, metric_rows)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summarize(results))
    merge_rows = [{"run_id": r.run_id, "seed": r.seed, "strategy": r.strategy, **ev.to_dict()}
                  for r in results for ev in r.merge_events]
    _write_csv(out / "merges.csv", MERGE_COLUMNS, merge_rows)
    written += [out / "metrics.csv", out / "summary.csv", out / "merges.csv"]
    if config is not None:
        _write_text(out / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(out / "config.json")
    if errors:
        _write_text(out / "errors.jsonl", "".join(json.dumps(e, sort_keys=True, default=_jsonable) + "\n"
                                                  for e in errors))
        written.append(out / "errors.jsonl")
    return written


def read_metrics(output_dir):
    with open(Path(output_dir) / "metrics.csv", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def check_trajectory(records):
    """Raise AssertionError unless ``records`` (one run) obey the log invariants.

    Iteration numbers increase, and each merge's actual interval equals the
    iterations since the previous merge or the start of its task.
    """
    last_iter = 0
    last_mark = 0
    current_task = None
    merges = 0
    for rec in records:
        kind = rec["type"]
        if kind == "iter":
            assert rec["global_iter"] == last_iter + 1, f"non-contiguous iteration at {rec}"
            if rec["task_id"] != current_task:
                current_task = rec["task_id"]
                last_mark = last_iter
            last_iter = rec["global_iter"]
        elif kind == "merge":
            merges += 1
            assert rec["iteration"] == last_iter
            assert rec["actual_interval"] == last_iter - last_mark, (
                f"merge {rec['merge_index']} spans {rec['actual_interval']} but the gap is "
                f"{last_iter - last_mark}")
            last_mark = last_iter
    return merges


def read_trajectory(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
