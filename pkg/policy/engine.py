"""Session loop: tracker → forecaster → one timer policy per intervention spec.

The same SessionEngine drives offline runs and service sessions, so both
produce identical events for identical frame streams.
"""
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Deque, Dict, Iterable, List, Optional, Sequence, Tuple

from config.models import EngineConfig, PolicyConfig
from core.errors import InsufficientHistoryError, ObservationError
from forecaster.forecaster import dump_record, sample_remaining_times
from policy.intervention import (InterventionEvent, InterventionKind, InterventionSpec, absence_horizon,
                                 validate_spec_set)
from policy.timer_policy import TIMER_PHASES, PolicyState, step_policy
from procedure.graph import TransitionGraph
from tracker.tracker import BeliefState, FrameObservation, StepTracker, completed_steps

TIME_TOLERANCE = 1e-6


@dataclass
class TargetTrace:
    """Per-tick policy inputs for one target; independent of the entropy threshold."""
    times: List[float] = field(default_factory=list)
    estimates: List[Optional[float]] = field(default_factory=list)
    entropies: List[Optional[float]] = field(default_factory=list)
    detections: List[bool] = field(default_factory=list)


@dataclass
class SessionRun:
    events: List[InterventionEvent]
    tick_log: List[Dict[str, Any]]
    states: Dict[int, PolicyState]
    distributions: List[Dict[str, Any]]
    traces: Dict[int, TargetTrace]


class _EntropySmoother:
    """Trailing moving average of the per-tick entropy over the last w seconds."""

    def __init__(self, window: float):
        self.window = window
        self.values: Deque[Tuple[float, float]] = deque()

    def push(self, t: float, value: Optional[float]) -> Optional[float]:
        if value is not None:
            self.values.append((t, value))
        while self.values and self.values[0][0] <= t - self.window + TIME_TOLERANCE:
            self.values.popleft()
        if value is None or not self.values:
            return None
        return sum(v for _, v in self.values) / len(self.values)


class SessionEngine:
    """Incremental per-session pipeline; feed frames in time order from one consumer."""

    def __init__(self, graph: TransitionGraph, specs: Sequence[InterventionSpec], cfg: EngineConfig,
                 session_id: str = "", dump_distributions: bool = False,
                 trace_targets: Iterable[int] = ()):
        validate_spec_set(specs, graph)
        self.graph = graph
        self.specs = list(specs)
        self.cfg = cfg
        self.session_id = session_id
        self.dump_distributions = dump_distributions
        self.tracker = StepTracker(graph, cfg.tracker)
        self.history: Deque[BeliefState] = deque(maxlen=cfg.tracker.window_frames + cfg.tracker.smooth_frames)
        self.tick_frames = max(1, int(round(cfg.policy.tick / cfg.tracker.frame_length)))

        self.trace_targets = sorted(set(trace_targets))
        self.targets = sorted({spec.target for spec in self.specs} | set(self.trace_targets))
        self.states: Dict[int, PolicyState] = {spec.target: PolicyState() for spec in self.specs}
        self.traces: Dict[int, TargetTrace] = {target: TargetTrace() for target in self.trace_targets}
        self._smoothers = {target: _EntropySmoother(cfg.policy.entropy_smooth) for target in self.targets}
        self._detected_since_tick = {target: False for target in self.targets}
        self._detected_ever: set = set()

        self.events: List[InterventionEvent] = []
        self.tick_log: List[Dict[str, Any]] = []
        self.distributions: List[Dict[str, Any]] = []
        self.frames_seen = 0
        self.finished = False

    @property
    def belief(self) -> BeliefState:
        return self.tracker.belief

    def feed(self, frame: FrameObservation) -> List[InterventionEvent]:
        """Consume one frame; returns the interventions fired at this frame."""
        if self.finished:
            raise ObservationError(f"session {self.session_id}: frame t={frame.t} after the stream was finished")
        fl = self.cfg.tracker.frame_length
        previous_t = self.tracker.belief.t
        if frame.t <= previous_t + TIME_TOLERANCE:
            raise ObservationError(f"session {self.session_id}: non-monotonic frame t={frame.t} after t={previous_t}")
        if frame.t > previous_t + fl + TIME_TOLERANCE:
            self.tracker.advance_gap(frame.t)
            self.history.clear()
        belief = self.tracker.update(frame)
        self.history.append(belief)
        self.frames_seen += 1
        self._latch_detections()

        frame_index = int(round(belief.t / fl))
        if frame_index % self.tick_frames != 0:
            return []
        return self._tick(belief)

    def feed_all(self, frames: Iterable[FrameObservation]) -> List[InterventionEvent]:
        fired = []
        for frame in frames:
            fired.extend(self.feed(frame))
        return fired

    def _latch_detections(self) -> None:
        try:
            completed = completed_steps(self.history, self.cfg.tracker)
        except InsufficientHistoryError:
            return
        for target in self.targets:
            if target in completed:
                self._detected_since_tick[target] = True
                self._detected_ever.add(target)

    def _needs_forecast(self, target: int) -> bool:
        state = self.states.get(target)
        if state is not None and not state.is_terminal:
            return True
        return target in self.traces and target not in self._detected_ever

    def _tick(self, belief: BeliefState) -> List[InterventionEvent]:
        t = belief.t
        row_targets: Dict[str, Dict[str, Any]] = {}
        inputs: Dict[int, Tuple[Optional[float], Optional[float], bool]] = {}
        needed = [target for target in self.targets if self._needs_forecast(target)]
        forecasts = sample_remaining_times(self.graph, belief, needed, self.cfg.forecast) if needed else {}
        if self.dump_distributions:
            self.distributions.extend(dump_record(forecasts[target]) for target in needed if target in forecasts)
        for target in self.targets:
            detection = self._detected_since_tick[target]
            self._detected_since_tick[target] = False
            if target in needed:
                dist = forecasts.get(target)
                estimate, entropy = (dist.expectation, dist.entropy) if dist is not None else (None, None)
                smoothed = self._smoothers[target].push(t, entropy)
            else:
                estimate, smoothed = None, None
            inputs[target] = (estimate, smoothed, detection)
            if target in self.traces:
                trace = self.traces[target]
                trace.times.append(t)
                trace.estimates.append(estimate)
                trace.entropies.append(smoothed)
                trace.detections.append(detection)

        fired: List[InterventionEvent] = []
        for spec in self.specs:
            estimate, smoothed, detection = inputs[spec.target]
            state, event = step_policy(self.states[spec.target], t, estimate, smoothed, detection, spec,
                                       self.cfg.policy, step_name=self.graph.name_of(spec.target))
            self.states[spec.target] = state
            if event is not None:
                fired.append(event)
        for target, (estimate, smoothed, _) in inputs.items():
            row_targets[str(target)] = {
                "E": estimate,
                "H": smoothed,
                "phase": self.states[target].phase.value if target in self.states else None,
            }
        self.tick_log.append({"t": round(t, 6), "decoded_step": belief.decoded_step, "targets": row_targets})
        self.events.extend(fired)
        return fired

    def finish(self, t_end: Optional[float] = None) -> List[InterventionEvent]:
        """Close the stream and judge absences.

        Armed notify-if-forgotten timers keep ticking on the policy grid without
        evidence, each up to t_end + k_plus + the target's mean duration, and fire
        when they come due. Remind timers end with the stream. Idempotent.
        """
        if self.finished:
            return []
        self.finished = True
        t_end = self.belief.t if t_end is None else max(t_end, self.belief.t)
        limits = {spec.target: t_end + absence_horizon(spec, self.graph) for spec in self.specs
                  if spec.kind is InterventionKind.NOTIFY_IF_FORGOTTEN
                  and self.states[spec.target].phase in TIMER_PHASES}
        fired: List[InterventionEvent] = []
        tick_s = self.tick_frames * self.cfg.tracker.frame_length
        tick_index = int(self.belief.t / tick_s + TIME_TOLERANCE)
        while limits:
            tick_index += 1
            t = round(tick_index * tick_s, 6)
            for spec in self.specs:
                if spec.target not in limits:
                    continue
                if t > limits[spec.target] + TIME_TOLERANCE:
                    del limits[spec.target]
                    continue
                detection = self._detected_since_tick[spec.target]
                self._detected_since_tick[spec.target] = False
                state, event = step_policy(self.states[spec.target], t, None, None, detection, spec,
                                           self.cfg.policy, step_name=self.graph.name_of(spec.target))
                self.states[spec.target] = state
                if event is not None:
                    fired.append(event)
                if state.phase not in TIMER_PHASES:
                    del limits[spec.target]
        if fired:
            logging.info(f"Session {self.session_id or '-'}: {len(fired)} interventions fired after the last frame")
        self.events.extend(fired)
        return fired

    def result(self) -> SessionRun:
        return SessionRun(events=list(self.events), tick_log=list(self.tick_log), states=dict(self.states),
                          distributions=list(self.distributions), traces=dict(self.traces))


def run_session(graph: TransitionGraph, specs: Sequence[InterventionSpec], frames: Iterable[FrameObservation],
                cfg: EngineConfig, session_id: str = "", dump_distributions: bool = False) -> SessionRun:
    """Offline replay of a whole frame stream through the engine."""
    engine = SessionEngine(graph, specs, cfg, session_id=session_id, dump_distributions=dump_distributions)
    engine.feed_all(frames)
    engine.finish()
    logging.info(f"Session {session_id or '-'}: {engine.frames_seen} frames, {len(engine.events)} interventions")
    return engine.result()


def trace_session(graph: TransitionGraph, frames: Iterable[FrameObservation], targets: Iterable[int],
                  cfg: EngineConfig, session_id: str = "") -> Dict[int, TargetTrace]:
    """Record the threshold-independent policy inputs for every target of a session."""
    engine = SessionEngine(graph, [], cfg, session_id=session_id, trace_targets=targets)
    engine.feed_all(frames)
    return engine.traces


def replay_policy(trace: TargetTrace, spec: InterventionSpec, cfg: PolicyConfig,
                  step_name: Optional[str] = None) -> Tuple[PolicyState, List[InterventionEvent]]:
    """Run one spec's state machine over a recorded trace."""
    state = PolicyState()
    events = []
    for t, estimate, entropy, detection in zip(trace.times, trace.estimates, trace.entropies, trace.detections):
        state, event = step_policy(state, t, estimate, entropy, detection, spec, cfg, step_name=step_name)
        if event is not None:
            events.append(event)
        if state.is_terminal:
            break
    return state, events
