"""Step-transition graph: construction from annotated sessions, validation, trajectory enumeration and file I/O."""
import heapq
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from config import settings
from config.models import GraphBuildConfig
from core.errors import GraphError, NoPathError
from file_operations.file_io import sha256_of_text
from file_operations.json_operations import canonical_json, read_json, write_json
from procedure.sessions import SessionLog


@dataclass(frozen=True)
class StepDef:
    id: int
    name: str
    mean_duration: float
    std_duration: float = 0.0
    detectability_f1: Optional[float] = None


@dataclass(frozen=True)
class Edge:
    source: int
    target: int
    prob: float


@dataclass(frozen=True)
class TransitionGraph:
    steps: Tuple[StepDef, ...]
    edges: Tuple[Edge, ...]
    initial: Tuple[Tuple[int, float], ...]
    terminals: FrozenSet[int] = field(default_factory=frozenset)

    @cached_property
    def step_ids(self) -> List[int]:
        return [step.id for step in self.steps]

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    @cached_property
    def index_of(self) -> Dict[int, int]:
        return {step.id: index for index, step in enumerate(self.steps)}

    @cached_property
    def step_by_id(self) -> Dict[int, StepDef]:
        return {step.id: step for step in self.steps}

    @cached_property
    def out_edges(self) -> Dict[int, List[Edge]]:
        grouped: Dict[int, List[Edge]] = defaultdict(list)
        for edge in self.edges:
            grouped[edge.source].append(edge)
        return dict(grouped)

    @cached_property
    def digraph(self) -> nx.DiGraph:
        g = nx.DiGraph()
        g.add_nodes_from(self.step_ids)
        for edge in self.edges:
            g.add_edge(edge.source, edge.target, prob=edge.prob)
        return g

    @cached_property
    def mean_durations(self) -> np.ndarray:
        return np.array([step.mean_duration for step in self.steps], dtype=float)

    @cached_property
    def std_durations(self) -> np.ndarray:
        return np.array([step.std_duration for step in self.steps], dtype=float)

    @cached_property
    def initial_vector(self) -> np.ndarray:
        vector = np.zeros(self.n_steps)
        for step_id, prob in self.initial:
            vector[self.index_of[step_id]] = prob
        return vector

    @cached_property
    def graph_hash(self) -> str:
        return sha256_of_text(canonical_json(graph_to_dict(self)))

    def name_of(self, step_id: int) -> str:
        step = self.step_by_id.get(step_id)
        return step.name if step else f"s{step_id}"


@dataclass(frozen=True)
class Trajectory:
    path: Tuple[int, ...]
    prob: float
    raw_prob: float
    mean_transit_time: float


@dataclass(frozen=True)
class TrajectorySet:
    origin: int
    target: int
    trajectories: Tuple[Trajectory, ...]
    renormalized: bool
    truncated: bool = False
    raw_total: float = 1.0


@dataclass(frozen=True)
class Violation:
    rule: str
    subject: str
    message: str

    def __str__(self):
        return f"[{self.rule}] {self.subject}: {self.message}"


def _sample_std(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1))


def build_graph(
        sessions: Sequence[SessionLog],
        names: Optional[Mapping[int, str]] = None,
        f1_scores: Optional[Mapping[int, float]] = None,
        cfg: GraphBuildConfig = GraphBuildConfig()
) -> TransitionGraph:
    """Build the transition graph from annotated demonstration sessions."""
    if not sessions:
        raise GraphError("cannot build a graph from an empty session list")
    empty = [s.session_id for s in sessions if not s.annotations]
    if empty:
        raise GraphError(f"sessions with zero annotations: {empty}")

    durations: Dict[int, List[float]] = defaultdict(list)
    pair_counts: Counter = Counter()
    first_counts: Counter = Counter()
    last_steps = set()
    for session in sessions:
        sequence = session.step_sequence
        for annotation in session.annotations:
            durations[annotation.step].append(annotation.duration)
        for a, b in zip(sequence, sequence[1:]):
            if a != b:
                pair_counts[(a, b)] += 1
        first_counts[sequence[0]] += 1
        last_steps.add(sequence[-1])

    universe = set(durations)
    expected = set(range(1, max(universe) + 1))
    if names:
        expected |= set(range(1, max(names) + 1))
    missing = sorted(expected - universe)
    if missing or min(universe) < 1:
        raise GraphError(f"inconsistent step universe: ids must cover 1..N, missing annotations for {missing}")
    if names:
        unnamed = sorted(universe - set(names))
        if unnamed:
            raise GraphError(f"inconsistent step universe: no name for annotated steps {unnamed}")

    steps = tuple(
        StepDef(
            id=step_id,
            name=(names or {}).get(step_id, f"s{step_id}"),
            mean_duration=float(np.mean(durations[step_id])),
            std_duration=_sample_std(durations[step_id]),
            detectability_f1=(f1_scores or {}).get(step_id),
        )
        for step_id in sorted(universe)
    )

    dropped = [(a, b) for (a, b) in pair_counts if a in last_steps]
    if dropped:
        logging.warning(f"Dropping {len(dropped)} transitions leaving terminal steps: {sorted(dropped)}")
    edges = _edge_probabilities(
        {pair: count for pair, count in pair_counts.items() if pair[0] not in last_steps},
        sorted(universe), cfg,
    )

    total_first = sum(first_counts.values())
    initial = tuple((step_id, first_counts[step_id] / total_first) for step_id in sorted(first_counts))
    graph = TransitionGraph(steps=steps, edges=edges, initial=initial, terminals=frozenset(last_steps))
    logging.info(f"Built graph with {graph.n_steps} steps and {len(edges)} edges from {len(sessions)} sessions")
    return graph


def _edge_probabilities(pair_counts: Mapping[Tuple[int, int], int], step_ids: List[int],
                        cfg: GraphBuildConfig) -> Tuple[Edge, ...]:
    by_source: Dict[int, Dict[int, int]] = defaultdict(dict)
    for (a, b), count in pair_counts.items():
        by_source[a][b] = count

    edges = []
    for source in sorted(by_source):
        successors = by_source[source]
        kept = {b: c for b, c in successors.items() if c >= cfg.min_edge_count}
        if not kept:
            # pruning must not strand a non-terminal step
            best = max(successors.values())
            kept = {b: c for b, c in successors.items() if c == best}
        if cfg.edge_smoothing > 0:
            candidates = [b for b in step_ids if b != source]
            counts = {b: kept.get(b, 0) + cfg.edge_smoothing for b in candidates}
        else:
            counts = dict(kept)
        total = sum(counts.values())
        edges.extend(Edge(source, b, counts[b] / total) for b in sorted(counts))
    return tuple(edges)


def validate_graph(graph: TransitionGraph) -> List[Violation]:
    """Return every broken invariant of the graph; an empty list means the graph is well formed."""
    violations: List[Violation] = []
    ids = graph.step_ids
    id_set = set(ids)

    if len(id_set) != len(ids):
        violations.append(Violation("unique-ids", "steps", "duplicate step ids"))
    if sorted(id_set) != list(range(1, len(id_set) + 1)):
        violations.append(Violation("contiguous-ids", "steps", "step ids must be 1..N"))
    for step in graph.steps:
        if not step.mean_duration > 0:
            violations.append(Violation("mean-duration", f"s{step.id}", f"mean_duration {step.mean_duration} must be > 0"))
        if step.std_duration < 0:
            violations.append(Violation("std-duration", f"s{step.id}", f"std_duration {step.std_duration} must be >= 0"))
        if step.detectability_f1 is not None and not 0.0 <= step.detectability_f1 <= 1.0:
            violations.append(Violation("f1-range", f"s{step.id}", f"detectability_f1 {step.detectability_f1} outside [0, 1]"))

    for edge in graph.edges:
        subject = f"s{edge.source}->s{edge.target}"
        if edge.source not in id_set or edge.target not in id_set:
            violations.append(Violation("edge-endpoint", subject, "edge references a missing step"))
        if not 0.0 < edge.prob <= 1.0:
            violations.append(Violation("edge-prob", subject, f"probability {edge.prob} outside (0, 1]"))

    for step_id in ids:
        outgoing = graph.out_edges.get(step_id, [])
        if step_id in graph.terminals:
            if outgoing:
                violations.append(Violation("terminal-edges", f"s{step_id}", "terminal step has outgoing edges"))
            continue
        total = sum(edge.prob for edge in outgoing)
        if abs(total - 1.0) > settings.PROB_TOLERANCE:
            violations.append(Violation("out-sum", f"s{step_id}", f"outgoing probabilities sum to {total:.12g}, expected 1"))

    for terminal in graph.terminals:
        if terminal not in id_set:
            violations.append(Violation("terminal-exists", f"s{terminal}", "terminal references a missing step"))

    initial_total = sum(prob for _, prob in graph.initial)
    if abs(initial_total - 1.0) > settings.PROB_TOLERANCE:
        violations.append(Violation("initial-sum", "initial", f"initial distribution sums to {initial_total:.12g}"))
    for step_id, prob in graph.initial:
        if step_id not in id_set:
            violations.append(Violation("initial-exists", f"s{step_id}", "initial mass on a missing step"))
        if prob < 0:
            violations.append(Violation("initial-prob", f"s{step_id}", f"negative initial mass {prob}"))

    if violations:
        # reachability is meaningless on a structurally broken graph
        return violations

    sources = [step_id for step_id, prob in graph.initial if prob > 0]
    reachable = set(sources)
    for source in sources:
        reachable |= reachable_from(graph, source)
    for step_id in ids:
        if step_id not in reachable:
            violations.append(Violation("reachability", f"s{step_id}", "step is unreachable from the initial distribution"))
    if not graph.terminals:
        violations.append(Violation("terminal-reachability", "terminals", "graph has no terminal step"))
    else:
        for step_id in sorted(reachable):
            if step_id in graph.terminals:
                continue
            if not graph.terminals & reachable_from(graph, step_id):
                violations.append(Violation("terminal-reachability", f"s{step_id}", "no terminal step is reachable"))
    return violations


def enumerate_trajectories(graph: TransitionGraph, origin: int, target: int,
                           max_paths: int = settings.MAX_PATHS) -> TrajectorySet:
    """Enumerate simple paths origin→target by depth-first search, keeping the max_paths most probable."""
    if origin not in graph.index_of or target not in graph.index_of:
        raise GraphError(f"unknown step in trajectory query ({origin}, {target})")
    if max_paths < 1:
        raise GraphError("max_paths must be at least 1")
    if origin == target:
        only = Trajectory(path=(origin,), prob=1.0, raw_prob=1.0, mean_transit_time=0.0)
        return TrajectorySet(origin, target, (only,), renormalized=False)

    g = graph.digraph
    means = graph.step_by_id
    candidates = []
    for path in nx.all_simple_paths(g, origin, target):
        raw = math.prod(g.edges[a, b]["prob"] for a, b in zip(path, path[1:]))
        candidates.append((raw, tuple(path)))
    if not candidates:
        raise NoPathError(f"no path from s{origin} to s{target}")

    truncated = len(candidates) > max_paths
    if truncated:
        logging.debug(f"Truncating {len(candidates)} trajectories s{origin}->s{target} to {max_paths}")
        candidates = heapq.nlargest(max_paths, candidates, key=lambda item: (item[0], _reverse_key(item[1])))
    candidates.sort(key=lambda item: (-item[0], item[1]))

    raw_total = math.fsum(raw for raw, _ in candidates)
    trajectories = tuple(
        Trajectory(
            path=path,
            prob=raw / raw_total,
            raw_prob=raw,
            mean_transit_time=math.fsum(means[step].mean_duration for step in path[1:-1]),
        )
        for raw, path in candidates
    )
    return TrajectorySet(
        origin=origin,
        target=target,
        trajectories=trajectories,
        renormalized=abs(raw_total - 1.0) > settings.PROB_TOLERANCE,
        truncated=truncated,
        raw_total=raw_total,
    )


def _reverse_key(path: Tuple[int, ...]) -> Tuple[int, ...]:
    # nlargest keeps larger keys; invert ids so ties prefer the lexicographically smaller path
    return tuple(-step for step in path)


def reachable_from(graph: TransitionGraph, step_id: int) -> FrozenSet[int]:
    return frozenset(nx.descendants(graph.digraph, step_id))


def graph_to_dict(graph: TransitionGraph) -> Dict[str, Any]:
    return {
        "steps": [
            {
                "id": step.id,
                "name": step.name,
                "mean_duration_s": float(step.mean_duration),
                "std_duration_s": float(step.std_duration),
                "f1": None if step.detectability_f1 is None else float(step.detectability_f1),
            }
            for step in sorted(graph.steps, key=lambda s: s.id)
        ],
        "edges": [
            {"from": edge.source, "to": edge.target, "prob": float(edge.prob)}
            for edge in sorted(graph.edges, key=lambda e: (e.source, e.target))
        ],
        "initial": [{"step": step_id, "prob": float(prob)} for step_id, prob in sorted(graph.initial)],
        "terminals": sorted(graph.terminals),
    }


def graph_from_dict(data: Mapping[str, Any]) -> TransitionGraph:
    try:
        steps = tuple(
            StepDef(
                id=int(item["id"]),
                name=str(item.get("name", f"s{item['id']}")),
                mean_duration=float(item["mean_duration_s"]),
                std_duration=float(item.get("std_duration_s", 0.0)),
                detectability_f1=None if item.get("f1") is None else float(item["f1"]),
            )
            for item in data["steps"]
        )
        edges = tuple(Edge(int(e["from"]), int(e["to"]), float(e["prob"])) for e in data.get("edges", []))
        initial = tuple((int(i["step"]), float(i["prob"])) for i in data["initial"])
        terminals = frozenset(int(t) for t in data.get("terminals", []))
    except (KeyError, TypeError, ValueError) as e:
        raise GraphError(f"malformed graph document: {e}") from None
    return TransitionGraph(
        steps=tuple(sorted(steps, key=lambda s: s.id)),
        edges=tuple(sorted(edges, key=lambda e: (e.source, e.target))),
        initial=tuple(sorted(initial)),
        terminals=terminals,
    )


def save_graph(graph: TransitionGraph, file_path: Path) -> Path:
    write_json(file_path, graph_to_dict(graph))
    logging.info(f"Graph saved to {file_path} (hash {graph.graph_hash[:12]})")
    return file_path


def load_graph(file_path: Path, validate: bool = True) -> TransitionGraph:
    graph = graph_from_dict(read_json(file_path))
    if validate:
        violations = validate_graph(graph)
        if violations:
            raise GraphError(f"{file_path} is not a valid graph: " + "; ".join(str(v) for v in violations))
    return graph


def load_step_names(file_path: Path) -> Dict[int, str]:
    """Read a `{"1": "Clean the table", ...}` map of step names."""
    data = read_json(file_path)
    return {int(key): str(value) for key, value in data.items()}


def linear_graph(durations: Iterable[Tuple[float, float]], names: Optional[Sequence[str]] = None) -> TransitionGraph:
    """Convenience constructor for a single-threaded procedure s1→s2→…→sN."""
    durations = list(durations)
    steps = tuple(
        StepDef(i + 1, names[i] if names else f"s{i + 1}", float(mean), float(std))
        for i, (mean, std) in enumerate(durations)
    )
    edges = tuple(Edge(i, i + 1, 1.0) for i in range(1, len(steps)))
    return TransitionGraph(steps=steps, edges=edges, initial=((1, 1.0),), terminals=frozenset({len(steps)}))
