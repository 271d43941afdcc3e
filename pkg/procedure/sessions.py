import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from core.errors import GraphError
from file_operations.json_operations import read_json, write_json


@dataclass(frozen=True)
class Annotation:
    step: int
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class SessionLog:
    """Ground-truth annotation of one demonstration session."""
    session_id: str
    annotations: Tuple[Annotation, ...]
    skipped: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        previous_end = None
        for annotation in self.annotations:
            if annotation.end <= annotation.start:
                raise GraphError(f"session {self.session_id}: step {annotation.step} has end <= start")
            if previous_end is not None and annotation.start < previous_end:
                raise GraphError(f"session {self.session_id}: annotations overlap or are out of order "
                                 f"at step {annotation.step} (start {annotation.start})")
            previous_end = annotation.end
        performed = set(self.step_sequence)
        overlap = sorted(performed.intersection(self.skipped))
        if overlap:
            raise GraphError(f"session {self.session_id}: skipped steps {overlap} also appear in annotations")

    @property
    def step_sequence(self) -> List[int]:
        return [annotation.step for annotation in self.annotations]

    @property
    def end_time(self) -> float:
        return self.annotations[-1].end if self.annotations else 0.0

    def first_start(self, step: int, not_before: float = float('-inf')) -> Optional[float]:
        """Start of the first occurrence of step at or after not_before, else of its first occurrence."""
        starts = [a.start for a in self.annotations if a.step == step]
        if not starts:
            return None
        later = [s for s in starts if s >= not_before]
        return later[0] if later else starts[0]

    def step_at(self, t: float) -> Optional[int]:
        for annotation in self.annotations:
            if annotation.start <= t < annotation.end:
                return annotation.step
        return None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "session": self.session_id,
            "annotations": [
                {"step": a.step, "start_s": float(a.start), "end_s": float(a.end)}
                for a in self.annotations
            ],
            "skipped": sorted(self.skipped),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], default_id: str = "") -> 'SessionLog':
        try:
            annotations = tuple(
                Annotation(int(item["step"]), float(item["start_s"]), float(item["end_s"]))
                for item in data["annotations"]
            )
        except (KeyError, TypeError, ValueError) as e:
            raise GraphError(f"malformed session record {data.get('session', default_id)!r}: {e}") from None
        return cls(
            session_id=str(data.get("session", default_id)),
            annotations=annotations,
            skipped=tuple(int(s) for s in data.get("skipped", [])),
        )


def save_session(session: SessionLog, file_path: Path) -> Path:
    return write_json(file_path, session.to_dict())


def load_session(file_path: Path) -> SessionLog:
    return SessionLog.from_dict(read_json(file_path), default_id=file_path.stem)


def load_sessions(path: Path) -> List[SessionLog]:
    """Load sessions from a directory of `*.json` files or from one file holding a list of sessions."""
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        sessions = [load_session(f) for f in files]
    else:
        data = read_json(path)
        records = data if isinstance(data, list) else [data]
        sessions = [SessionLog.from_dict(record, default_id=f"{path.stem}-{i}") for i, record in enumerate(records)]
    logging.info(f"Loaded {len(sessions)} sessions from {path}")
    return sessions
