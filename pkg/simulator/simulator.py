"""Synthetic procedure sessions: Markov walks over the step graph with skips and confusion-noised frames."""
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import numpy as np
from scipy import stats

from config import settings
from core.errors import SimulationError
from file_operations.file_io import write_frame_table
from file_operations.json_operations import read_json, write_json
from procedure.graph import TransitionGraph, graph_from_dict, graph_to_dict, validate_graph
from procedure.sessions import Annotation, SessionLog, save_session
from tracker.tracker import FrameObservation

ROW_TOLERANCE = 1e-9


@dataclass(frozen=True)
class Scenario:
    graph: TransitionGraph
    confusion: np.ndarray
    skip: Mapping[int, float] = field(default_factory=dict)
    duration_jitter: float = 1.0
    seed: int = 0
    kappa: float = settings.DIRICHLET_KAPPA
    frame_length: float = settings.FRAME_LENGTH_S
    max_session_s: float = settings.MAX_SESSION_S
    tail_s: float = 0.0

    def __post_init__(self):
        confusion = np.asarray(self.confusion, dtype=float)
        object.__setattr__(self, "confusion", confusion)
        n = self.graph.n_steps
        if confusion.ndim != 2 or confusion.shape[0] != n or confusion.shape[1] not in (n, n + 1):
            raise SimulationError(f"confusion must be {n}x{n} (or {n}x{n + 1} with background), got {confusion.shape}")
        if np.any(confusion < 0) or np.any(np.abs(confusion.sum(axis=1) - 1.0) > ROW_TOLERANCE):
            raise SimulationError("confusion rows must be non-negative and sum to 1")
        for step_id, prob in self.skip.items():
            if step_id not in self.graph.index_of:
                raise SimulationError(f"skip probability for unknown step s{step_id}")
            if not 0.0 <= prob <= 1.0:
                raise SimulationError(f"skip probability for s{step_id} outside [0, 1]")
        if self.duration_jitter < 0 or self.kappa <= 0 or self.frame_length <= 0 or self.tail_s < 0:
            raise SimulationError("duration_jitter, tail_s must be >= 0 and kappa, frame_length > 0")

    @property
    def has_background(self) -> bool:
        return self.confusion.shape[1] == self.graph.n_steps + 1

    def to_dict(self) -> Dict[str, Any]:
        data = graph_to_dict(self.graph)
        data.update({
            "confusion": self.confusion.tolist(),
            "skip": {str(k): float(v) for k, v in sorted(self.skip.items())},
            "duration_jitter": float(self.duration_jitter),
            "seed": int(self.seed),
            "kappa": float(self.kappa),
            "frame_length_s": float(self.frame_length),
            "max_session_s": float(self.max_session_s),
            "tail_s": float(self.tail_s),
        })
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Scenario':
        graph = graph_from_dict(data)
        return cls(
            graph=graph,
            confusion=_confusion_from_dict(data, graph.n_steps),
            skip={int(k): float(v) for k, v in data.get("skip", {}).items()},
            duration_jitter=float(data.get("duration_jitter", 1.0)),
            seed=int(data.get("seed", 0)),
            kappa=float(data.get("kappa", settings.DIRICHLET_KAPPA)),
            frame_length=float(data.get("frame_length_s", settings.FRAME_LENGTH_S)),
            max_session_s=float(data.get("max_session_s", settings.MAX_SESSION_S)),
            tail_s=float(data.get("tail_s", 0.0)),
        )


def _confusion_from_dict(data: Mapping[str, Any], n_steps: int) -> np.ndarray:
    if "confusion" in data:
        return np.asarray(data["confusion"], dtype=float)
    if "f1" in data:
        f1_by_step = {int(k): float(v) for k, v in data["f1"].items()}
        return confusion_from_f1(n_steps, f1_by_step, float(data.get("default_diagonal", 1.0)),
                                 background=bool(data.get("background", False)))
    return np.eye(n_steps)


@dataclass(frozen=True)
class SimulatedSession:
    log: SessionLog
    frames: List[FrameObservation]
    frame_steps: List[int]    # generating true step of each frame


def _session_key(session_id: str) -> int:
    return zlib.crc32(session_id.encode('utf-8'))


def _rng(scenario: Scenario, session_id: str, *stream: int) -> np.random.Generator:
    return np.random.default_rng([scenario.seed & 0xFFFFFFFFFFFFFFFF, _session_key(session_id), *stream])


def emit_observation(true_step: int, scenario: Scenario, frame_index: int, session_id: str = "") -> FrameObservation:
    """Frame observation for true_step.

    The classifier's pick is drawn from the true step's confusion row and mixed
    half-and-half with that row; a Dirichlet draw of concentration kappa around
    the mixture makes repeated frames vary. The expected observation is the row
    itself and the per-frame argmax follows the row, so the diagonal sets the
    raw frame accuracy.
    """
    if true_step not in scenario.graph.index_of:
        raise SimulationError(f"unknown true step s{true_step}")
    row = scenario.confusion[scenario.graph.index_of[true_step]]
    rng = _rng(scenario, session_id, 1, frame_index)
    picked = rng.choice(row.size, p=row / row.sum())
    mixture = 0.5 * row
    mixture[picked] += 0.5
    support = mixture > 0
    probs = np.zeros_like(row)
    if support.sum() == 1 or np.isinf(scenario.kappa):
        probs = mixture
    else:
        probs[support] = stats.dirichlet.rvs(scenario.kappa * mixture[support], random_state=rng)[0]
    probs = probs / probs.sum()
    t = round((frame_index + 1) * scenario.frame_length, 6)
    return FrameObservation(t=t, probs=probs)


def _draw_duration(scenario: Scenario, step_index: int, rng: np.random.Generator) -> float:
    mean = scenario.graph.mean_durations[step_index]
    std = scenario.graph.std_durations[step_index] * scenario.duration_jitter
    floor = scenario.frame_length
    if std <= 0:
        return max(float(mean), floor)
    lower = (floor - mean) / std
    return float(stats.truncnorm.rvs(lower, np.inf, loc=mean, scale=std, random_state=rng))


def _walk(scenario: Scenario, session_id: str) -> SessionLog:
    graph = scenario.graph
    rng = _rng(scenario, session_id, 0)
    fl = scenario.frame_length
    initial_ids = [step_id for step_id, _ in graph.initial]
    initial_probs = np.array([prob for _, prob in graph.initial])
    current = int(rng.choice(initial_ids, p=initial_probs / initial_probs.sum()))

    annotations: List[Annotation] = []
    skipped: List[int] = []
    frame_cursor = 0
    visits = 0
    while True:
        visits += 1
        if visits > settings.MAX_WALK_STEPS:
            raise SimulationError(f"session {session_id} visited {settings.MAX_WALK_STEPS} steps "
                                  f"without reaching a terminal step")
        index = graph.index_of[current]
        if rng.random() < scenario.skip.get(current, 0.0):
            skipped.append(current)
        else:
            n_frames = max(1, int(round(_draw_duration(scenario, index, rng) / fl)))
            start = round(frame_cursor * fl, 6)
            frame_cursor += n_frames
            annotations.append(Annotation(current, start, round(frame_cursor * fl, 6)))
        if frame_cursor * fl > scenario.max_session_s:
            raise SimulationError(f"session {session_id} exceeded {scenario.max_session_s:.0f} s "
                                  f"without reaching a terminal step")
        outgoing = graph.out_edges.get(current, [])
        if current in graph.terminals or not outgoing:
            break
        probs = np.array([edge.prob for edge in outgoing])
        current = outgoing[int(rng.choice(len(outgoing), p=probs / probs.sum()))].target

    # a revisited step is recorded as skipped only if it was never performed
    performed = {a.step for a in annotations}
    skipped = sorted(set(skipped) - performed)
    if not annotations:
        raise SimulationError(f"session {session_id}: every visited step was skipped")
    return SessionLog(session_id=session_id, annotations=tuple(annotations), skipped=tuple(skipped))


def simulate_session(scenario: Scenario, session_id: str = "sim-0000") -> SimulatedSession:
    """Walk the graph from its initial distribution and render frame observations for the walk."""
    log = _walk(scenario, session_id)
    fl = scenario.frame_length
    frame_steps: List[int] = []
    for annotation in log.annotations:
        frame_steps.extend([annotation.step] * int(round(annotation.duration / fl)))
    if scenario.tail_s > 0:
        frame_steps.extend([log.annotations[-1].step] * int(round(scenario.tail_s / fl)))
    frames = [emit_observation(step, scenario, i, session_id) for i, step in enumerate(frame_steps)]
    return SimulatedSession(log=log, frames=frames, frame_steps=frame_steps)


def simulate_batch(scenario: Scenario, n_sessions: int, prefix: str = "sim", workers: int = 1) -> List[SimulatedSession]:
    ids = [f"{prefix}-{i:04d}" for i in range(n_sessions)]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            sessions = list(executor.map(lambda sid: simulate_session(scenario, sid), ids))
    else:
        sessions = [simulate_session(scenario, sid) for sid in ids]
    logging.info(f"Simulated {n_sessions} sessions (seed {scenario.seed})")
    return sessions


def confusion_from_f1(n_steps: int, f1_by_step: Optional[Mapping[int, float]] = None,
                      default_diagonal: float = 1.0, background: bool = False) -> np.ndarray:
    """Row-stochastic confusion whose diagonal follows per-step detectability.

    Off-diagonal mass is spread evenly over every other step (and background),
    so the true step keeps the largest share whenever its diagonal is above 1/width.
    """
    f1_by_step = f1_by_step or {}
    width = n_steps + 1 if background else n_steps
    if width == 1:
        return np.ones((1, 1))
    confusion = np.zeros((n_steps, width))
    for i in range(n_steps):
        diagonal = float(np.clip(f1_by_step.get(i + 1, default_diagonal), 0.0, 1.0))
        confusion[i, :] = (1.0 - diagonal) / (width - 1)
        confusion[i, i] = diagonal
    return confusion


def uniform_confusion_with_diagonal(n_steps: int, diagonal: float) -> np.ndarray:
    """Diagonal d, remaining mass spread evenly over the other steps."""
    if n_steps == 1:
        return np.ones((1, 1))
    confusion = np.full((n_steps, n_steps), (1.0 - diagonal) / (n_steps - 1))
    np.fill_diagonal(confusion, diagonal)
    return confusion


def save_scenario(scenario: Scenario, file_path: Path) -> Path:
    return write_json(file_path, scenario.to_dict())


def load_scenario(file_path: Path) -> Scenario:
    scenario = Scenario.from_dict(read_json(file_path))
    violations = validate_graph(scenario.graph)
    if violations:
        raise SimulationError(f"{file_path}: invalid scenario graph: " + "; ".join(str(v) for v in violations))
    return scenario


def write_simulated_session(session: SimulatedSession, scenario: Scenario, out_dir: Path) -> None:
    """Write `sessions/<id>.json` and `frames/<id>.csv` under out_dir."""
    save_session(session.log, out_dir / "sessions" / f"{session.log.session_id}.json")
    times = [frame.t for frame in session.frames]
    if session.frames:
        probs = np.vstack([frame.probs for frame in session.frames])
    else:
        probs = np.zeros((0, scenario.confusion.shape[1]))
    write_frame_table(out_dir / "frames" / f"{session.log.session_id}.csv", times, probs,
                      background=scenario.has_background)
