"""Leave-one-session-out evaluation of the forecast-driven policy against the session-start baseline."""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from statistics import median
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from config import settings
from config.models import EngineConfig, GraphBuildConfig
from core.errors import EvaluationError, GraphError, UnreachableTargetError
from evaluation.metrics import DispositionTally, tally_dispositions, timing_error
from evaluation.report import CellResult, EvalReport, summarize_cells
from logger import logging_utils
from policy.engine import TargetTrace, replay_policy, run_session, trace_session
from policy.intervention import InterventionKind, InterventionSpec
from policy.timer_policy import baseline_estimate
from procedure.graph import TransitionGraph, build_graph, validate_graph
from procedure.sessions import SessionLog, load_sessions
from simulator.simulator import Scenario, simulate_batch
from tracker.tracker import FrameObservation, load_frames

PROPOSED = "proposed"
BASELINE = "baseline"


@dataclass(frozen=True)
class SessionRecord:
    log: SessionLog
    frames: Tuple[FrameObservation, ...]

    @property
    def session_id(self) -> str:
        return self.log.session_id


def load_dataset(dataset_dir: Path) -> List[SessionRecord]:
    """Pair `sessions/<id>.json` with `frames/<id>.csv` under dataset_dir."""
    logs = load_sessions(dataset_dir / "sessions")
    records = []
    for log in logs:
        frames = load_frames(dataset_dir / "frames" / f"{log.session_id}.csv")
        records.append(SessionRecord(log=log, frames=tuple(frames)))
    return records


def _timing_spec(target: int, h: float) -> InterventionSpec:
    # arming time and estimate are what the timing metric scores; offsets do not matter
    return InterventionSpec(target=target, kind=InterventionKind.REMIND_IN_ADVANCE, k_minus=0.0, k_plus=0.0, h=h)


def _proposed_error(trace: TargetTrace, log: SessionLog, target: int, h: float, engine_cfg: EngineConfig,
                    fallback_estimate: Optional[float]) -> Optional[Tuple[float, bool, float]]:
    """(error, used_fallback, armed_at) for one session/step, None when the step cannot be scored."""
    state, _ = replay_policy(trace, _timing_spec(target, h), engine_cfg.policy)
    arming = state.first_surviving_arming
    if arming is not None:
        start = log.first_start(target)
        return timing_error(arming.estimate, arming.started_at, start), False, arming.started_at
    if fallback_estimate is None:
        return None
    return timing_error(fallback_estimate, 0.0, log.first_start(target)), True, 0.0


def _traces_for(graph: TransitionGraph, record: SessionRecord, engine_cfg: EngineConfig) -> Dict[int, TargetTrace]:
    return trace_session(graph, record.frames, graph.step_ids, engine_cfg, session_id=record.session_id)


def _baseline_estimates(graph: TransitionGraph, engine_cfg: EngineConfig) -> Dict[int, Optional[float]]:
    estimates: Dict[int, Optional[float]] = {}
    for step_id in graph.step_ids:
        try:
            estimates[step_id] = baseline_estimate(graph, step_id, engine_cfg.forecast)
        except UnreachableTargetError:
            logging.warning(f"s{step_id} unreachable from the initial distribution; cells marked absent")
            estimates[step_id] = None
    return estimates


def _tune_from_traces(traced: Sequence[Tuple[SessionRecord, Dict[int, TargetTrace]]], graph: TransitionGraph,
                      grid: Sequence[float], engine_cfg: EngineConfig,
                      baselines: Mapping[int, Optional[float]]) -> Dict[int, float]:
    thresholds: Dict[int, float] = {}
    ordered_grid = sorted(grid)
    for step_id in graph.step_ids:
        best: Optional[Tuple[float, float]] = None
        armed_anywhere = False
        for h in ordered_grid:
            errors = []
            for record, traces in traced:
                if step_id not in record.log.step_sequence:
                    continue
                outcome = _proposed_error(traces[step_id], record.log, step_id, h, engine_cfg, baselines.get(step_id))
                if outcome is None:
                    continue
                error, used_fallback, _ = outcome
                armed_anywhere = armed_anywhere or not used_fallback
                errors.append(error)
            if not errors:
                continue
            mean_error = sum(errors) / len(errors)
            # strict comparison keeps the smallest h on ties
            if best is None or mean_error < best[0] - 1e-12:
                best = (mean_error, h)
        if best is None or not armed_anywhere:
            thresholds[step_id] = float(median(ordered_grid))
            logging.warning(f"s{step_id} never armed at any grid value; using grid median {thresholds[step_id]}")
        else:
            thresholds[step_id] = best[1]
    return thresholds


def grid_search_thresholds(training: Sequence[SessionRecord], graph: TransitionGraph, grid: Sequence[float],
                           engine_cfg: EngineConfig) -> Dict[int, float]:
    """Per step, the grid entropy threshold with the lowest mean training timing error (ties → smaller h)."""
    if not grid:
        raise EvaluationError("threshold grid must not be empty")
    traced = [(record, _traces_for(graph, record, engine_cfg)) for record in training]
    return _tune_from_traces(traced, graph, grid, engine_cfg, _baseline_estimates(graph, engine_cfg))


def _evaluate_fold(fold: int, dataset: Sequence[SessionRecord], grid: Sequence[float], engine_cfg: EngineConfig,
                   graph_cfg: GraphBuildConfig, names: Optional[Mapping[int, str]],
                   max_tuning_sessions: Optional[int]) -> Tuple[List[CellResult], Dict[str, object]]:
    held_out = dataset[fold]
    training = [record for i, record in enumerate(dataset) if i != fold]
    fold_meta: Dict[str, object] = {"fold": fold, "held_out": held_out.session_id}
    try:
        graph = build_graph([record.log for record in training], names=names, cfg=graph_cfg)
    except GraphError as e:
        logging.warning(f"Fold {fold}: cannot build graph ({e}); all cells of {held_out.session_id} absent")
        fold_meta["absent"] = str(e)
        return [], fold_meta
    violations = validate_graph(graph)
    if violations:
        logging.warning(f"Fold {fold}: graph has {len(violations)} violations, first: {violations[0]}")

    baselines = _baseline_estimates(graph, engine_cfg)
    tuning = training[:max_tuning_sessions] if max_tuning_sessions else training
    traced = [(record, _traces_for(graph, record, engine_cfg)) for record in tuning]
    thresholds = _tune_from_traces(traced, graph, grid, engine_cfg, baselines)
    fold_meta["thresholds"] = {str(k): v for k, v in sorted(thresholds.items())}

    traces = _traces_for(graph, held_out, engine_cfg)
    cells: List[CellResult] = []
    for step_id in graph.step_ids:
        if step_id not in held_out.log.step_sequence:
            continue
        if baselines[step_id] is None:
            continue
        baseline_error = timing_error(baselines[step_id], 0.0, held_out.log.first_start(step_id))
        cells.append(CellResult(held_out.session_id, step_id, BASELINE, baseline_error, False, 0.0))
        outcome = _proposed_error(traces[step_id], held_out.log, step_id, thresholds[step_id], engine_cfg,
                                  baselines[step_id])
        error, used_fallback, armed_at = outcome
        cells.append(CellResult(held_out.session_id, step_id, PROPOSED, error, used_fallback, armed_at))
    logging.info(f"Fold {fold} ({held_out.session_id}) evaluated: {len(cells) // 2} steps scored")
    return cells, fold_meta


def loso_evaluate(dataset: Sequence[SessionRecord], engine_cfg: EngineConfig,
                  grid: Sequence[float] = settings.DEFAULT_GRID,
                  graph_cfg: GraphBuildConfig = GraphBuildConfig(),
                  names: Optional[Mapping[int, str]] = None,
                  max_tuning_sessions: Optional[int] = settings.MAX_TUNING_SESSIONS,
                  workers: int = 1, task: str = "task") -> EvalReport:
    """Leave-one-session-out comparison of proposed vs baseline timing error per step."""
    if len(dataset) < 3:
        raise EvaluationError(f"leave-one-session-out needs at least 3 sessions, got {len(dataset)}")
    if not grid:
        raise EvaluationError("threshold grid must not be empty")
    start_time = time.time()
    dataset = sorted(dataset, key=lambda record: record.session_id)

    def run(fold: int):
        return _evaluate_fold(fold, dataset, grid, engine_cfg, graph_cfg, names, max_tuning_sessions)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            results = list(executor.map(run, range(len(dataset))))
    else:
        results = [run(fold) for fold in range(len(dataset))]

    cells = [cell for fold_cells, _ in results for cell in fold_cells]
    metadata = {
        "task": task,
        "engine": engine_cfg.to_dict(),
        "graph_build": graph_cfg.to_dict(),
        "grid": [float(h) for h in sorted(grid)],
        "max_tuning_sessions": max_tuning_sessions,
        "folds": [meta for _, meta in results],
    }
    logging_utils.log_performance(start_time, f"LOSO evaluation over {len(dataset)} sessions")
    return EvalReport(task=task, cells=summarize_cells(cells), raw_cells=cells, dispositions={}, metadata=metadata)


def intervention_study(scenario: Scenario, specs: Sequence[InterventionSpec], n_sessions: int,
                       engine_cfg: EngineConfig, workers: int = 1,
                       graph: Optional[TransitionGraph] = None) -> Tuple[Dict[int, DispositionTally], Dict[str, list]]:
    """Simulate sessions with intentional skips, run the specs and tally notify-if-forgotten dispositions."""
    graph = graph or scenario.graph
    sessions = simulate_batch(scenario, n_sessions, prefix="study", workers=workers)

    def run(session):
        return session.log.session_id, run_session(graph, specs, session.frames, engine_cfg,
                                                   session_id=session.log.session_id).events

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            outcomes = list(executor.map(run, sessions))
    else:
        outcomes = [run(session) for session in sessions]
    events = dict(outcomes)
    return tally_dispositions(events, [session.log for session in sessions], specs, graph)
