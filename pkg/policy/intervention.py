from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from config import settings
from core.errors import PolicyError
from file_operations.json_operations import read_json, write_json
from procedure.graph import StepDef, TransitionGraph


class InterventionKind(str, Enum):
    REMIND_IN_ADVANCE = "remind-in-advance"
    NOTIFY_IF_FORGOTTEN = "notify-if-forgotten"


class Disposition(str, Enum):
    TP = "TP"
    FP = "FP"
    FN = "FN"
    TN = "TN"


MESSAGE_TEMPLATES = {
    InterventionKind.REMIND_IN_ADVANCE: "Don't forget to do {name}",
    InterventionKind.NOTIFY_IF_FORGOTTEN: "Have you done {name}?",
}


@dataclass(frozen=True)
class InterventionSpec:
    target: int
    kind: InterventionKind
    k_minus: float = settings.K_MINUS_S
    k_plus: float = settings.K_PLUS_S
    h: float = settings.DEFAULT_THRESHOLD_NATS

    def __post_init__(self):
        object.__setattr__(self, "kind", InterventionKind(self.kind))
        if self.k_minus < 0 or self.k_plus < 0:
            raise PolicyError(f"spec s{self.target}: K offsets must be non-negative")
        if not self.h > 0:
            raise PolicyError(f"spec s{self.target}: entropy threshold must be positive")

    def offset_estimate(self, estimate: float) -> float:
        """Timer length for an armed estimate, floored at zero."""
        if self.kind is InterventionKind.REMIND_IN_ADVANCE:
            return max(estimate - self.k_minus, 0.0)
        return max(estimate + self.k_plus, 0.0)

    def with_threshold(self, h: float) -> 'InterventionSpec':
        return InterventionSpec(self.target, self.kind, self.k_minus, self.k_plus, h)

    def to_dict(self) -> Dict[str, Any]:
        return {"target": self.target, "kind": self.kind.value,
                "k_minus": self.k_minus, "k_plus": self.k_plus, "h": self.h}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'InterventionSpec':
        try:
            return cls(
                target=int(data["target"]),
                kind=InterventionKind(data["kind"]),
                k_minus=float(data.get("k_minus", settings.K_MINUS_S)),
                k_plus=float(data.get("k_plus", settings.K_PLUS_S)),
                h=float(data.get("h", settings.DEFAULT_THRESHOLD_NATS)),
            )
        except (KeyError, ValueError) as e:
            raise PolicyError(f"malformed intervention spec {data!r}: {e}") from None


@dataclass(frozen=True)
class InterventionEvent:
    t: float
    target: int
    kind: InterventionKind
    message: str
    disposition: Optional[Disposition] = None

    def to_dict(self) -> Dict[str, Any]:
        record = {"t": round(self.t, 6), "target": self.target, "kind": self.kind.value, "message": self.message}
        if self.disposition is not None:
            record["disposition"] = self.disposition.value
        return record

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'InterventionEvent':
        disposition = data.get("disposition")
        return cls(
            t=float(data["t"]),
            target=int(data["target"]),
            kind=InterventionKind(data["kind"]),
            message=str(data["message"]),
            disposition=Disposition(disposition) if disposition else None,
        )


def render_message(kind: InterventionKind, step_name: str) -> str:
    return MESSAGE_TEMPLATES[InterventionKind(kind)].format(name=step_name)


def absence_horizon(spec: InterventionSpec, graph: TransitionGraph) -> float:
    """Seconds after the stream ends during which a forgotten target can still be judged."""
    return spec.k_plus + graph.step_by_id[spec.target].mean_duration


def suggest_intervention_kind(step: StepDef, threshold: float = settings.NOTIFY_F1_THRESHOLD) -> InterventionKind:
    """Offer notify-if-forgotten only for steps the frame classifier detects reliably."""
    if step.detectability_f1 is not None and step.detectability_f1 >= threshold:
        return InterventionKind.NOTIFY_IF_FORGOTTEN
    return InterventionKind.REMIND_IN_ADVANCE


def validate_spec_set(specs: Sequence[InterventionSpec], graph: TransitionGraph) -> None:
    targets = [spec.target for spec in specs]
    if len(set(targets)) != len(targets):
        raise PolicyError(f"intervention specs must have distinct targets, got {targets}")
    unknown = sorted(set(targets) - set(graph.step_ids))
    if unknown:
        raise PolicyError(f"intervention specs reference unknown steps {unknown}")


def save_specs(specs: Sequence[InterventionSpec], file_path: Path) -> Path:
    return write_json(file_path, [spec.to_dict() for spec in specs])


def load_specs(file_path: Path) -> List[InterventionSpec]:
    data = read_json(file_path)
    if not isinstance(data, list):
        raise PolicyError(f"{file_path}: spec file must hold a list")
    return [InterventionSpec.from_dict(item) for item in data]
