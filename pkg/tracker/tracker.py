"""Online belief tracking over procedure steps from frame-level class probabilities.

The tracker is a forward (filtering) recursion over a hidden Markov model whose
frame-level transition matrix is derived from the step graph: each step keeps
itself with probability max(floor, 1 - frame_length / mean_duration) so that
the expected dwell matches the demonstrated mean duration, and the remaining
mass follows the graph's out-edges.
"""
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import FrozenSet, List, Optional, Sequence

import numpy as np

from config.models import TrackerConfig
from core.errors import InsufficientHistoryError, ObservationError
from file_operations.file_io import read_frame_table
from procedure.graph import TransitionGraph

PROB_SUM_TOLERANCE = 1e-6
TIME_TOLERANCE = 1e-6


@dataclass(frozen=True)
class FrameObservation:
    t: float
    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", probs)
        if probs.ndim != 1 or probs.size == 0:
            raise ObservationError(f"frame at t={self.t}: probs must be a non-empty vector")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise ObservationError(f"frame at t={self.t}: probs must be finite and non-negative")
        if abs(probs.sum() - 1.0) > PROB_SUM_TOLERANCE:
            raise ObservationError(f"frame at t={self.t}: probs sum to {probs.sum():.8f}, expected 1")


@dataclass(frozen=True)
class BeliefState:
    t: float
    posterior: np.ndarray
    elapsed_in_step: np.ndarray
    step_ids: tuple

    @property
    def decoded_step(self) -> int:
        # np.argmax returns the first maximum, i.e. the lowest step id on ties
        return self.step_ids[int(np.argmax(self.posterior))]


def transition_matrix(graph: TransitionGraph, cfg: TrackerConfig) -> np.ndarray:
    """Frame-level transition matrix A[i, j] = P(step j at t+1 | step i at t)."""
    n = graph.n_steps
    matrix = np.zeros((n, n))
    for i, step in enumerate(graph.steps):
        outgoing = graph.out_edges.get(step.id, [])
        if not outgoing:
            matrix[i, i] = 1.0
            continue
        stay = max(cfg.self_transition_floor, 1.0 - cfg.frame_length / step.mean_duration)
        stay = min(max(stay, 0.0), 1.0)
        matrix[i, i] = stay
        for edge in outgoing:
            matrix[i, graph.index_of[edge.target]] += (1.0 - stay) * edge.prob
    return matrix


def init_belief(graph: TransitionGraph) -> BeliefState:
    n = graph.n_steps
    return BeliefState(
        t=0.0,
        posterior=graph.initial_vector.copy(),
        elapsed_in_step=np.zeros(n),
        step_ids=tuple(graph.step_ids),
    )


def emission_vector(obs: FrameObservation, n_steps: int, cfg: TrackerConfig) -> np.ndarray:
    """Step-only, ε-smoothed emission likelihoods for one frame."""
    probs = obs.probs
    if probs.size == n_steps + 1:
        background = probs[-1]
        probs = probs[:-1]
        if cfg.background == "fold":
            probs = probs + background / n_steps
        else:
            total = probs.sum()
            probs = probs / total if total > 0 else np.full(n_steps, 1.0 / n_steps)
    elif probs.size != n_steps:
        raise ObservationError(f"frame at t={obs.t}: {probs.size} probabilities for a {n_steps}-step graph")
    eps = cfg.emission_smoothing
    return (1.0 - eps) * probs + eps / n_steps


class StepTracker:
    """Per-session tracker; drive one instance from a single consumer."""

    def __init__(self, graph: TransitionGraph, cfg: TrackerConfig = TrackerConfig()):
        self.graph = graph
        self.cfg = cfg
        self.matrix = transition_matrix(graph, cfg)
        self._stay = np.diag(self.matrix).copy()
        self.belief = init_belief(graph)

    def reset(self) -> BeliefState:
        self.belief = init_belief(self.graph)
        return self.belief

    def update(self, obs: FrameObservation) -> BeliefState:
        self.belief = update_belief(self.belief, obs, self.graph, self.cfg, matrix=self.matrix)
        return self.belief

    def advance_gap(self, until_t: float) -> BeliefState:
        """Propagate the belief without evidence up to one frame before until_t (muted sensors)."""
        fl = self.cfg.frame_length
        missing = int(round((until_t - self.belief.t) / fl)) - 1
        if missing > 0:
            logging.debug(f"Bridging {missing} muted frames before t={until_t:.2f}")
        for _ in range(max(missing, 0)):
            self.belief = _predict(self.belief, self.matrix, fl)
        return self.belief


def _predict(belief: BeliefState, matrix: np.ndarray, frame_length: float,
             likelihood: Optional[np.ndarray] = None) -> BeliefState:
    stay = np.diag(matrix)
    predicted = belief.posterior @ matrix
    stayed_mass = belief.posterior * stay
    with np.errstate(invalid='ignore', divide='ignore'):
        elapsed = np.where(predicted > 0, stayed_mass * (belief.elapsed_in_step + frame_length) / predicted, 0.0)
    t = belief.t + frame_length
    posterior = predicted if likelihood is None else predicted * likelihood
    total = posterior.sum()
    if not total > 0:
        # evidence contradicts every reachable step; fall back to the prediction
        posterior = predicted
        total = predicted.sum()
    posterior = posterior / total
    elapsed = np.clip(elapsed, 0.0, t)
    return BeliefState(t=t, posterior=posterior, elapsed_in_step=elapsed, step_ids=belief.step_ids)


def update_belief(belief: BeliefState, obs: FrameObservation, graph: TransitionGraph,
                  cfg: TrackerConfig = TrackerConfig(), matrix: Optional[np.ndarray] = None) -> BeliefState:
    """One filtering step: posterior ∝ emission × (prior posterior pushed through the frame transitions)."""
    expected_t = belief.t + cfg.frame_length
    if abs(obs.t - expected_t) > TIME_TOLERANCE:
        raise ObservationError(f"frame at t={obs.t} does not follow belief at t={belief.t} "
                               f"(expected t={expected_t:.6f})")
    likelihood = emission_vector(obs, graph.n_steps, cfg)
    if matrix is None:
        matrix = transition_matrix(graph, cfg)
    updated = _predict(belief, matrix, cfg.frame_length, likelihood)
    # keep the frame's own clock to avoid drift over long sessions
    return replace(updated, t=obs.t)


def moving_average(series: np.ndarray, size: int) -> np.ndarray:
    """Trailing moving average along axis 0; the first size-1 rows average what is available."""
    series = np.asarray(series, dtype=float)
    cumulative = np.cumsum(np.vstack([np.zeros((1,) + series.shape[1:]), series]), axis=0)
    counts = np.minimum(np.arange(1, len(series) + 1), size)
    sums = cumulative[1:] - cumulative[np.maximum(np.arange(1, len(series) + 1) - size, 0)]
    return sums / counts.reshape((-1,) + (1,) * (series.ndim - 1))


def completed_steps(history: Sequence[BeliefState], cfg: TrackerConfig = TrackerConfig()) -> FrozenSet[int]:
    """Steps whose smoothed posterior stays the argmax for detection_window seconds in a row."""
    needed = cfg.window_frames
    if len(history) < needed:
        raise InsufficientHistoryError(f"{len(history)} frames of history, need {needed}")
    step_ids = history[0].step_ids
    posteriors = np.vstack([belief.posterior for belief in history])
    top = np.argmax(moving_average(posteriors, cfg.smooth_frames), axis=1)
    completed = set()
    run = 0
    for i, column in enumerate(top):
        run = run + 1 if i > 0 and column == top[i - 1] else 1
        if run >= needed:
            completed.add(step_ids[column])
    return frozenset(completed)


def detect_step_completion(history: Sequence[BeliefState], step: int, cfg: TrackerConfig = TrackerConfig()) -> bool:
    """True iff the 1 s smoothed posterior of step is the argmax for detection_window seconds in a row."""
    try:
        return step in completed_steps(history, cfg)
    except InsufficientHistoryError:
        raise InsufficientHistoryError(f"cannot judge s{step} yet: need {cfg.window_frames} frames, "
                                       f"have {len(history)}") from None


def observations_from_table(times: Sequence[float], probs: np.ndarray) -> List[FrameObservation]:
    return [FrameObservation(float(t), row) for t, row in zip(times, probs)]


def decode_session(graph: TransitionGraph, frames: Sequence[FrameObservation],
                   cfg: TrackerConfig = TrackerConfig()) -> List[int]:
    """Run the tracker over a whole stream and return the decoded step per frame."""
    tracker = StepTracker(graph, cfg)
    return [tracker.update(frame).decoded_step for frame in frames]


def raw_argmax_steps(graph: TransitionGraph, frames: Sequence[FrameObservation]) -> List[int]:
    ids = graph.step_ids
    return [ids[int(np.argmax(frame.probs[:graph.n_steps]))] for frame in frames]


def load_frames(file_path: Path) -> List[FrameObservation]:
    times, probs, _ = read_frame_table(file_path)
    return observations_from_table(times, probs)
