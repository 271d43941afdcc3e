"""Intervention timer state machine and the sensor-free baseline trigger."""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple

from config.models import ForecastConfig, PolicyConfig
from core.errors import PolicyError
from forecaster.forecaster import exact_expected_remaining_time
from policy.intervention import InterventionEvent, InterventionSpec, render_message
from procedure.graph import TransitionGraph
from tracker.tracker import init_belief

TIME_TOLERANCE = 1e-6


class Phase(str, Enum):
    WATCHING = "watching"
    TIMER_PENDING_STABILITY = "timer-pending-stability"
    TIMER_RUNNING = "timer-running"
    FIRED = "fired"
    SUPPRESSED = "suppressed"
    CANCELLED = "cancelled"


TERMINAL_PHASES = frozenset({Phase.FIRED, Phase.SUPPRESSED})
TIMER_PHASES = frozenset({Phase.TIMER_PENDING_STABILITY, Phase.TIMER_RUNNING})


@dataclass(frozen=True)
class Arming:
    started_at: float
    estimate: float
    fires_at: float
    cancelled: bool = False
    cancelled_at: Optional[float] = None


@dataclass(frozen=True)
class PolicyState:
    phase: Phase = Phase.WATCHING
    timer_started_at: Optional[float] = None
    fires_at: Optional[float] = None
    armed_estimate: Optional[float] = None
    last_t: Optional[float] = None
    estimate_history: Tuple[Tuple[float, float], ...] = field(default_factory=tuple)
    armings: Tuple[Arming, ...] = field(default_factory=tuple)
    suppressed_before_arming: bool = False

    @property
    def is_terminal(self) -> bool:
        return self.phase in TERMINAL_PHASES

    @property
    def first_surviving_arming(self) -> Optional[Arming]:
        for arming in self.armings:
            if not arming.cancelled:
                return arming
        return None


def _trim_history(history: Tuple[Tuple[float, float], ...], t: float, horizon: float) -> Tuple[Tuple[float, float], ...]:
    """Keep entries inside [t - horizon, t] plus the newest one older than that as the window anchor."""
    cutoff = t - horizon + TIME_TOLERANCE
    older = [i for i, (ti, _) in enumerate(history) if ti <= cutoff]
    start = older[-1] if older else 0
    return history[start:]


def _is_stable(history: Tuple[Tuple[float, float], ...], t: float, cfg: PolicyConfig) -> bool:
    if not history or history[0][0] > t - cfg.stability_horizon + TIME_TOLERANCE:
        return False
    values = [value for _, value in history]
    return max(values) - min(values) <= cfg.stability_tolerance


def _fire(state: PolicyState, t: float, spec: InterventionSpec, step_name: str) -> Tuple[PolicyState, InterventionEvent]:
    event = InterventionEvent(t=t, target=spec.target, kind=spec.kind, message=render_message(spec.kind, step_name))
    logging.info(f"Intervention fired at t={t:.1f}s: {event.message}")
    return replace(state, phase=Phase.FIRED), event


def step_policy(state: PolicyState, t: float, estimate: Optional[float], entropy_smoothed: Optional[float],
                detection: bool, spec: InterventionSpec, cfg: PolicyConfig,
                step_name: Optional[str] = None) -> Tuple[PolicyState, Optional[InterventionEvent]]:
    """Advance one spec's timer state machine by one policy tick."""
    if state.last_t is not None and t < state.last_t - TIME_TOLERANCE:
        raise PolicyError(f"policy tick at t={t} precedes previous tick t={state.last_t}")
    step_name = step_name or f"s{spec.target}"
    history = state.estimate_history
    if estimate is not None:
        history = history + ((t, estimate),)
    history = _trim_history(history, t, cfg.stability_horizon)
    state = replace(state, last_t=t, estimate_history=history)

    if state.is_terminal:
        return state, None

    if state.phase in (Phase.WATCHING, Phase.CANCELLED):
        if detection:
            logging.info(f"s{spec.target} detected before any timer was armed; suppressing for this session")
            return replace(state, phase=Phase.SUPPRESSED, suppressed_before_arming=True), None
        if (estimate is not None and entropy_smoothed is not None and entropy_smoothed < spec.h
                and _is_stable(history, t, cfg)):
            fires_at = t + spec.offset_estimate(estimate)
            arming = Arming(started_at=t, estimate=estimate, fires_at=fires_at)
            state = replace(state, phase=Phase.TIMER_PENDING_STABILITY, timer_started_at=t, fires_at=fires_at,
                            armed_estimate=estimate, armings=state.armings + (arming,))
            logging.debug(f"Timer armed for s{spec.target} at t={t:.1f}s with E={estimate:.1f}s, fires at {fires_at:.1f}s")
            if fires_at <= t + TIME_TOLERANCE:
                return _fire(state, t, spec, step_name)
            return state, None
        return replace(state, phase=Phase.WATCHING), None

    # timer phases
    if detection:
        logging.debug(f"s{spec.target} detected while its timer was running; suppressed")
        return replace(state, phase=Phase.SUPPRESSED), None

    elapsed = t - state.timer_started_at
    if state.phase is Phase.TIMER_PENDING_STABILITY and estimate is not None and elapsed <= cfg.stability_horizon:
        predicted = state.armed_estimate - elapsed
        if abs(estimate - predicted) > cfg.stability_tolerance:
            logging.warning(f"Timer for s{spec.target} cancelled at t={t:.1f}s: E={estimate:.1f}s "
                            f"drifted from predicted {predicted:.1f}s")
            cancelled = replace(state.armings[-1], cancelled=True, cancelled_at=t)
            return replace(state, phase=Phase.CANCELLED, timer_started_at=None, fires_at=None,
                           armed_estimate=None, armings=state.armings[:-1] + (cancelled,)), None

    if t >= state.fires_at - TIME_TOLERANCE:
        return _fire(state, t, spec, step_name)
    if state.phase is Phase.TIMER_PENDING_STABILITY and elapsed >= cfg.stability_horizon - TIME_TOLERANCE:
        return replace(state, phase=Phase.TIMER_RUNNING), None
    return state, None


def baseline_trigger(graph: TransitionGraph, target: int, spec: InterventionSpec,
                     forecast_cfg: ForecastConfig = ForecastConfig()) -> float:
    """Fire time from the session-start expected remaining time offset by K; ignores every observation."""
    estimate = baseline_estimate(graph, target, forecast_cfg)
    return spec.offset_estimate(estimate)


def baseline_estimate(graph: TransitionGraph, target: int, forecast_cfg: ForecastConfig = ForecastConfig()) -> float:
    return exact_expected_remaining_time(graph, init_belief(graph), target, forecast_cfg.max_paths)
