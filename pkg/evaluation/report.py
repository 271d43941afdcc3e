"""Report aggregation and writers: report.json, report.txt and tab-separated plot data."""
import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np

from config import settings
from evaluation.metrics import DispositionTally, paired_t_test, standard_error
from file_operations.file_io import format_float, save_content_to_file
from file_operations.json_operations import write_json

POLICIES = ("baseline", "proposed")
REPORT_JSON = "report.json"
REPORT_TABLE = "report.txt"
STEP_ERRORS_TSV = "step_errors.tsv"


@dataclass(frozen=True)
class CellResult:
    """Timing error of one policy for one step in one held-out session."""
    session: str
    step: int
    policy: str
    error: float
    fallback: bool = False
    armed_at: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {"session": self.session, "step": self.step, "policy": self.policy,
                "error": self.error, "fallback": self.fallback, "armed_at": self.armed_at}


@dataclass(frozen=True)
class CellSummary:
    step: int
    policy: str
    mean: float
    se: float
    n: int
    fallbacks: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {"step": self.step, "policy": self.policy, "mean": self.mean, "se": self.se,
                "n": self.n, "fallbacks": self.fallbacks}


@dataclass(frozen=True)
class StepComparison:
    step: int
    baseline: CellSummary
    proposed: CellSummary
    p_value: Optional[float]

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value < settings.SIGNIFICANCE_ALPHA

    def to_dict(self) -> Dict[str, Any]:
        return {"step": self.step, "baseline": self.baseline.to_dict(), "proposed": self.proposed.to_dict(),
                "p_value": self.p_value, "significant": self.significant}


def _summary(step: int, policy: str, cells: Sequence[CellResult]) -> CellSummary:
    errors = [cell.error for cell in cells]
    return CellSummary(step=step, policy=policy, mean=float(np.mean(errors)) if errors else 0.0,
                       se=standard_error(errors), n=len(errors),
                       fallbacks=sum(1 for cell in cells if cell.fallback))


def summarize_cells(cells: Sequence[CellResult]) -> List[StepComparison]:
    """Per-step mean/SE/n for both policies plus the paired t-test across sessions."""
    grouped: Dict[int, Dict[str, List[CellResult]]] = defaultdict(lambda: defaultdict(list))
    for cell in cells:
        grouped[cell.step][cell.policy].append(cell)
    comparisons = []
    for step in sorted(grouped):
        baseline = sorted(grouped[step]["baseline"], key=lambda c: c.session)
        proposed = sorted(grouped[step]["proposed"], key=lambda c: c.session)
        p_value = None
        if [c.session for c in baseline] == [c.session for c in proposed]:
            p_value = paired_t_test([c.error for c in baseline], [c.error for c in proposed])
        comparisons.append(StepComparison(step, _summary(step, "baseline", baseline),
                                          _summary(step, "proposed", proposed), p_value))
    return comparisons


@dataclass
class EvalReport:
    task: str
    cells: List[StepComparison]
    raw_cells: List[CellResult] = field(default_factory=list)
    dispositions: Dict[int, DispositionTally] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def overall_mean(self, policy: str) -> Optional[float]:
        """Mean of the per-step means, as plotted per task."""
        means = [getattr(comparison, policy).mean for comparison in self.cells if getattr(comparison, policy).n]
        return float(np.mean(means)) if means else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task": self.task,
            "steps": [comparison.to_dict() for comparison in self.cells],
            "overall": {policy: self.overall_mean(policy) for policy in POLICIES},
            "sessions": [cell.to_dict() for cell in self.raw_cells],
            "dispositions": {str(target): tally.to_dict() for target, tally in sorted(self.dispositions.items())},
            "metadata": self.metadata,
        }


def _fmt(value: Optional[float], digits: int = 1) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def render_table(report: EvalReport, names: Optional[Mapping[int, str]] = None) -> str:
    """Aligned human-readable table of per-step timing errors."""
    names = names or {}
    header = ["step", "name", "baseline", "±se", "proposed", "±se", "n", "fallback", "p", "sig"]
    rows = [header]
    for c in report.cells:
        rows.append([f"s{c.step}", names.get(c.step, ""), _fmt(c.baseline.mean), _fmt(c.baseline.se),
                     _fmt(c.proposed.mean), _fmt(c.proposed.se), str(c.proposed.n), str(c.proposed.fallbacks),
                     _fmt(c.p_value, 3), "*" if c.significant else ""])
    rows.append(["all", "", _fmt(report.overall_mean("baseline")), "", _fmt(report.overall_mean("proposed")),
                 "", "", "", "", ""])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = ["  ".join(value.ljust(width) for value, width in zip(row, widths)).rstrip() for row in rows]
    text = [f"task: {report.task}", ""] + lines
    if report.dispositions:
        text += ["", "target  TP  FP  FN  TN"]
        for target, tally in sorted(report.dispositions.items()):
            counts = tally.to_dict()
            text.append(f"s{target:<6}" + "".join(f"{counts[k]:>4}" for k in ("TP", "FP", "FN", "TN")))
    return "\n".join(text) + "\n"


def write_tsv(file_path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    file_path.parent.mkdir(parents=True, exist_ok=True)
    with open(file_path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, delimiter='\t', lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else format_float(v) if isinstance(v, float) else v for v in row])
    return file_path


def write_report(report: EvalReport, out_dir: Path, names: Optional[Mapping[int, str]] = None) -> List[Path]:
    """Write the structured report, the aligned table and the per-step error-bar data."""
    paths = [
        write_json(out_dir / REPORT_JSON, report.to_dict()),
        save_content_to_file(render_table(report, names), out_dir / REPORT_TABLE),
    ]
    rows = []
    for c in report.cells:
        for summary in (c.baseline, c.proposed):
            rows.append([c.step, summary.policy, summary.mean, summary.se, summary.n])
    paths.append(write_tsv(out_dir / STEP_ERRORS_TSV, ["step", "policy", "mean_s", "se_s", "n"], rows))
    logging.info(f"Report written to {out_dir}")
    return paths


def write_tick_trace(tick_log: Sequence[Mapping[str, Any]], file_path: Path) -> Path:
    """One row per (tick, target): t, decoded step, E, H, phase."""
    rows = []
    for tick in tick_log:
        for target, values in sorted(tick["targets"].items(), key=lambda item: int(item[0])):
            rows.append([tick["t"], tick["decoded_step"], int(target), values["E"], values["H"], values["phase"]])
    return write_tsv(file_path, ["t", "decoded_step", "target", "E", "H", "phase"], rows)
