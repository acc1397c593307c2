"""Merge controller driven by the training trajectory.

Two signals decide when to merge:

* the learning signal, the per-step L1 size of the update accumulated since
  the previous merge. Its recent trend shrinks the merge interval while the
  model is learning fast and stretches it once learning slows down;
* the forgetting signal, the number of iterations in the current interval
  whose memory-probe loss exceeded a threshold calibrated on the first part
  of the interval. Enough activations force an early merge; none at all lets
  the merge be deferred, up to twice the scheduled interval.

The core is a set of pure functions over :class:`ControllerState`;
:class:`MergeController` wraps them for use inside a training loop and keeps
a structured event log.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from typing import NamedTuple, Optional

from .exceptions import ConfigError, ValidationError

logger = logging.getLogger(__name__)


class Phase(str, Enum):
    CALIBRATING = "calibrating"
    MONITORING = "monitoring"
    DEFERRED = "deferred"
    # calibration window closed without any memory loss; no threshold this interval
    INERT = "inert"


class Dominance(str, Enum):
    UP = "up"
    DOWN = "down"
    BALANCED = "balanced"


class Action(str, Enum):
    CONTINUE = "continue"
    MERGE_NOW = "merge_now"


class Reason(str, Enum):
    SCHEDULED = "scheduled"
    EARLY = "early"
    DEFERRED_FORGET_TRIGGER = "deferred_forget_trigger"
    DEFERRED_CAP = "deferred_cap"


class CalibrationUnavailable(ValidationError):
    pass


@dataclass(frozen=True)
class ControllerConfig:
    s_init: int = 8
    l_w: int = 3
    s_min: int = 2
    s_max: int = 128
    gamma_learn_plus_small: float = 2.0
    gamma_learn_minus_small: float = 1.5
    gamma_learn_plus_large: float = 1.5
    gamma_learn_minus_large: float = 2.0
    # the "large" gamma pair applies when the current interval exceeds this
    large_interval: int = 64
    gamma_forget: float = 2.0
    f_max: int = 3
    calib_fraction: float = 2 / 3
    # ablation switches
    adapt_interval: bool = True
    forgetting_timing: bool = True
    track_forgetting: bool = True

    def __post_init__(self):
        if not 1 <= self.s_min <= self.s_init <= self.s_max:
            raise ConfigError(
                f"need 1 <= s_min <= s_init <= s_max, got {self.s_min}, {self.s_init}, {self.s_max}")
        if self.l_w < 1:
            raise ConfigError("l_w must be >= 1")
        gammas = (self.gamma_learn_plus_small, self.gamma_learn_minus_small,
                  self.gamma_learn_plus_large, self.gamma_learn_minus_large, self.gamma_forget)
        if any(not g > 1 for g in gammas):
            raise ConfigError("all gamma factors must be > 1")
        if self.f_max < 1:
            raise ConfigError("f_max must be >= 1")
        if not 0 < self.calib_fraction < 1:
            raise ConfigError("calib_fraction must lie in (0, 1)")
        if self.forgetting_timing and not self.track_forgetting:
            raise ConfigError("forgetting_timing requires track_forgetting")

    def gammas_for(self, s_current):
        """``(gamma_plus, gamma_minus)`` for the given interval."""
        if s_current > self.large_interval:
            return self.gamma_learn_plus_large, self.gamma_learn_minus_large
        return self.gamma_learn_plus_small, self.gamma_learn_minus_small

    def calibration_window(self, s_current):
        frac = Fraction(self.calib_fraction).limit_denominator(10_000)
        return min(math.ceil(frac * s_current), s_current)


@dataclass
class ControllerState:
    s_current: int
    lambda_history: list = field(default_factory=list)
    steps_since_merge: int = 0
    phase: Phase = Phase.CALIBRATING
    calib_losses: list = field(default_factory=list)
    delta_threshold: Optional[float] = None
    f_count: int = 0
    merges_completed: int = 0

    def in_cold_start(self, config):
        return len(self.lambda_history) < config.l_w + 1

    def copy(self):
        return copy.deepcopy(self)


class TrendSummary(NamedTuple):
    n_up: int
    n_down: int
    n_flat: int
    dominance: Dominance

    @property
    def n_pairs(self):
        return self.n_up + self.n_down + self.n_flat


class MergeDecision(NamedTuple):
    action: Action
    reason: Optional[Reason] = None
    actual_interval: Optional[int] = None

    @property
    def merge(self):
        return self.action is Action.MERGE_NOW


CONTINUE = MergeDecision(Action.CONTINUE)


def initial_state(config):
    return ControllerState(s_current=config.s_init)


def trend(history, l_w):
    """Count rising, falling and flat steps among the last ``l_w`` adjacent pairs."""
    if not history:
        raise ValidationError("trend needs a non-empty history")
    recent = list(history[-(l_w + 1):])
    n_up = n_down = n_flat = 0
    for prev, cur in zip(recent[:-1], recent[1:]):
        if cur > prev:
            n_up += 1
        elif cur < prev:
            n_down += 1
        else:
            n_flat += 1
    if n_up > n_down:
        dominance = Dominance.UP
    elif n_down > n_up:
        dominance = Dominance.DOWN
    else:
        dominance = Dominance.BALANCED
    return TrendSummary(n_up, n_down, n_flat, dominance)


def _round_half_away(x):
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def next_interval(s_current, dominance, config):
    gamma_plus, gamma_minus = config.gammas_for(s_current)
    dominance = Dominance(dominance)
    if dominance is Dominance.UP:
        s_next = max(config.s_min, _round_half_away(s_current / gamma_minus))
    elif dominance is Dominance.DOWN:
        s_next = min(config.s_max, _round_half_away(s_current * gamma_plus))
    else:
        s_next = s_current
    return int(min(config.s_max, max(config.s_min, s_next)))


def calibrate_threshold(calib_losses, gamma_forget):
    if not calib_losses:
        raise CalibrationUnavailable("no memory losses were observed during calibration")
    return gamma_forget * (math.fsum(calib_losses) / len(calib_losses))


def observe_step(state, mem_loss, config):
    """Advance the controller by one training iteration.

    Returns the new state and the decision for this iteration. ``state`` is
    left untouched.
    """
    st = state.copy()
    st.steps_since_merge += 1
    n = st.steps_since_merge
    activated = False

    if config.track_forgetting:
        if st.phase is Phase.CALIBRATING:
            if mem_loss is not None:
                st.calib_losses.append(float(mem_loss))
            if n >= config.calibration_window(st.s_current):
                if st.calib_losses:
                    st.delta_threshold = calibrate_threshold(st.calib_losses, config.gamma_forget)
                    st.phase = Phase.MONITORING
                else:
                    st.phase = Phase.INERT
        elif st.phase in (Phase.MONITORING, Phase.DEFERRED):
            if mem_loss is not None and mem_loss > st.delta_threshold:
                st.f_count = min(st.f_count + 1, config.f_max)
                activated = True

    if st.phase is Phase.DEFERRED:
        if activated:
            return st, MergeDecision(Action.MERGE_NOW, Reason.DEFERRED_FORGET_TRIGGER, n)
        if n >= 2 * st.s_current:
            return st, MergeDecision(Action.MERGE_NOW, Reason.DEFERRED_CAP, n)
        return st, CONTINUE

    timing = config.forgetting_timing and st.phase is Phase.MONITORING
    if timing and st.f_count >= config.f_max and n < st.s_current:
        return st, MergeDecision(Action.MERGE_NOW, Reason.EARLY, n)
    if n >= st.s_current:
        if timing and st.f_count == 0:
            st.phase = Phase.DEFERRED
            return st, CONTINUE
        return st, MergeDecision(Action.MERGE_NOW, Reason.SCHEDULED, n)
    return st, CONTINUE


def _reset_interval(st):
    st.steps_since_merge = 0
    st.f_count = 0
    st.calib_losses = []
    st.delta_threshold = None
    st.phase = Phase.CALIBRATING


def on_merge(state, lambda_value, config):
    """Record the learning signal of the merge just executed and plan the next interval."""
    st = state.copy()
    st.lambda_history.append(float(lambda_value))
    if config.adapt_interval and not st.in_cold_start(config):
        st.s_current = next_interval(st.s_current, trend(st.lambda_history, config.l_w).dominance, config)
    _reset_interval(st)
    st.merges_completed += 1
    return st


def start_task(state, config, reset=False):
    """Open a fresh interval at a task boundary; history and interval carry over unless ``reset``."""
    if reset:
        return initial_state(config)
    st = state.copy()
    _reset_interval(st)
    return st


class MergeController:
    """Stateful wrapper used by the training loop.

    Every notable transition is appended to :attr:`events` as a plain dict
    and mirrored to the module logger at DEBUG level.
    """

    def __init__(self, config=None):
        self.config = config or ControllerConfig()
        self.state = initial_state(self.config)
        self.events = []
        self._step = 0

    def _emit(self, kind, **fields):
        record = {"event": kind, "global_step": self._step, **fields}
        self.events.append(record)
        logger.debug("controller %s", kind, extra={"controller_event": record})

    def observe(self, mem_loss):
        before = self.state
        self._step += 1
        self.state, decision = observe_step(before, mem_loss, self.config)
        st = self.state
        if before.phase is Phase.CALIBRATING and st.phase is Phase.MONITORING:
            self._emit("calibration_complete", delta=st.delta_threshold,
                       n_losses=len(st.calib_losses), s_current=st.s_current)
        if st.f_count > before.f_count:
            self._emit("activation", f_count=st.f_count, mem_loss=mem_loss,
                       steps_since_merge=st.steps_since_merge)
        if before.phase is not Phase.DEFERRED and st.phase is Phase.DEFERRED:
            self._emit("deferred", s_current=st.s_current)
        if decision.merge:
            self._emit("decision", reason=decision.reason.value,
                       actual_interval=decision.actual_interval, f_count=st.f_count)
        return decision

    def preview_trend(self, lambda_value):
        """Trend of the history as it will look once ``lambda_value`` is recorded."""
        return trend([*self.state.lambda_history, lambda_value], self.config.l_w)

    def merged(self, lambda_value):
        old = self.state.s_current
        self.state = on_merge(self.state, lambda_value, self.config)
        if self.state.s_current != old:
            self._emit("interval_change", old=old, new=self.state.s_current,
                       lambda_value=float(lambda_value))

    def start_task(self, reset=False):
        self.state = start_task(self.state, self.config, reset=reset)

    def snapshot(self):
        data = asdict(self.state)
        data["phase"] = self.state.phase.value
        return data
