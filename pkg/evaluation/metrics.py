import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from sklearn.metrics import confusion_matrix, f1_score

from core.errors import EvaluationError
from policy.intervention import Disposition, InterventionEvent, InterventionKind, InterventionSpec, absence_horizon
from procedure.graph import TransitionGraph
from procedure.sessions import SessionLog


def timing_error(armed_estimate: float, armed_at: float, actual_step_start: Optional[float]) -> float:
    """|E at timer start - actual remaining time until the target step began|."""
    if actual_step_start is None or actual_step_start < 0:
        raise EvaluationError("target step never occurred; excluded from timing statistics")
    return abs(armed_estimate - (actual_step_start - armed_at))


def standard_error(values: Sequence[float]) -> float:
    if len(values) < 2:
        return 0.0
    return float(np.std(values, ddof=1) / np.sqrt(len(values)))


def paired_t_test(first: Sequence[float], second: Sequence[float]) -> Optional[float]:
    """Two-sided paired t-test p-value, None when it is undefined."""
    if len(first) != len(second) or len(first) < 2:
        return None
    differences = np.asarray(first) - np.asarray(second)
    if np.allclose(differences, differences[0]):
        return None
    return float(stats.ttest_rel(first, second).pvalue)


def frame_macro_f1(true_steps: Sequence[int], predicted_steps: Sequence[int], labels: Sequence[int]) -> float:
    return float(f1_score(true_steps, predicted_steps, labels=list(labels), average='macro', zero_division=0))


def per_step_f1(true_steps: Sequence[int], predicted_steps: Sequence[int], labels: Sequence[int]) -> Dict[int, float]:
    scores = f1_score(true_steps, predicted_steps, labels=list(labels), average=None, zero_division=0)
    return {int(label): float(score) for label, score in zip(labels, scores)}


def frame_confusion(true_steps: Sequence[int], predicted_steps: Sequence[int], labels: Sequence[int]) -> np.ndarray:
    """Row-normalized confusion matrix (rows: true step)."""
    return confusion_matrix(true_steps, predicted_steps, labels=list(labels), normalize='true')


@dataclass
class DispositionTally:
    target: int
    counts: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return sum(self.counts[d] for d in Disposition)

    @property
    def correct(self) -> int:
        return self.counts[Disposition.TP] + self.counts[Disposition.TN]

    @property
    def precision(self) -> Optional[float]:
        fired = self.counts[Disposition.TP] + self.counts[Disposition.FP]
        return self.counts[Disposition.TP] / fired if fired else None

    @property
    def recall(self) -> Optional[float]:
        positives = self.counts[Disposition.TP] + self.counts[Disposition.FN]
        return self.counts[Disposition.TP] / positives if positives else None

    def to_dict(self) -> Dict[str, object]:
        record = {d.value: self.counts[d] for d in Disposition}
        record.update({"target": self.target, "precision": self.precision, "recall": self.recall})
        return record


def tally_dispositions(events: Mapping[str, Sequence[InterventionEvent]], logs: Sequence[SessionLog],
                       specs: Sequence[InterventionSpec], graph: TransitionGraph
                       ) -> Tuple[Dict[int, DispositionTally], Dict[str, List[InterventionEvent]]]:
    """TP/FP/FN/TN per notify-if-forgotten spec, plus the events annotated with their disposition."""
    notify_specs = [spec for spec in specs if spec.kind is InterventionKind.NOTIFY_IF_FORGOTTEN]
    tallies = {spec.target: DispositionTally(spec.target) for spec in notify_specs}
    annotated: Dict[str, List[InterventionEvent]] = {}
    for log in logs:
        performed = set(log.step_sequence)
        session_events = list(events.get(log.session_id, []))
        annotated_events = []
        for spec in notify_specs:
            horizon = log.end_time + absence_horizon(spec, graph)
            fired = [e for e in session_events
                     if e.target == spec.target and e.kind is spec.kind and e.t <= horizon + 1e-9]
            forgotten = spec.target not in performed
            if fired:
                disposition = Disposition.TP if forgotten else Disposition.FP
            else:
                disposition = Disposition.FN if forgotten else Disposition.TN
            tallies[spec.target].counts[disposition] += 1
            annotated_events.extend(
                InterventionEvent(e.t, e.target, e.kind, e.message, disposition) for e in fired)
        annotated_events.extend(e for e in session_events if e.kind is not InterventionKind.NOTIFY_IF_FORGOTTEN)
        annotated[log.session_id] = sorted(annotated_events, key=lambda e: (e.t, e.target))
    for tally in tallies.values():
        logging.info(f"s{tally.target}: " + ", ".join(f"{d.value}={tally.counts[d]}" for d in Disposition))
    return tallies, annotated
