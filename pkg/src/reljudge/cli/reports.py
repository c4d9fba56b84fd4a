"""
Report envelopes printed by the CLI with --json.
Every report shares status/command/diagnostics; the payload depends on the command.
"""

import time
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from src.reljudge import __version__
from src.reljudge.core.judge_pipeline import JudgeSummary
from src.reljudge.core.metrics import CorrelationReport
from src.reljudge.core.trec_io import LabelHistogram


class Diagnostics(BaseModel):
    command: str
    duration_ms: int
    version: str = __version__


class Report(BaseModel):
    status: Literal["ok", "error"] = "ok"
    command: str
    diagnostics: Diagnostics


class ErrorReport(Report):
    status: Literal["ok", "error"] = "error"
    error_code: str
    message: str


class StatsReport(Report):
    qrels: str
    histogram: LabelHistogram


class JudgeReport(Report):
    qrels_out: str
    audit_log: str
    summary: JudgeSummary


class RunDedupCount(BaseModel):
    run: str
    entries_before: int
    entries_after: int


class DedupReport(Report):
    before: LabelHistogram
    after: LabelHistogram
    runs: List[RunDedupCount] = Field(default_factory=list)
    out_dir: str


class ClustersReport(Report):
    clusters: int
    passages: int
    out: str


class Coverage(BaseModel):
    aligned: int
    only_in_a: int
    only_in_b: int


class AgreementReport(Report):
    coverage: Coverage
    kappa: float
    kappa_binary: Optional[float] = None
    labels: List[int]
    confusion: List[List[int]]
    per_label_accuracy: Dict[int, Optional[float]]
    binary_confusion: Optional[List[List[int]]] = None


class CorrelateReport(Report):
    runs_dir: str
    correlation: CorrelationReport
    scatter_csv: Optional[str] = None


def diagnostics_for(command: str, start_time: float) -> Diagnostics:
    return Diagnostics(command=command, duration_ms=int((time.monotonic() - start_time) * 1000))


def error_report(command: str, error_code: str, message: str, start_time: float) -> ErrorReport:
    """Create an error report."""
    return ErrorReport(
        command=command,
        diagnostics=diagnostics_for(command, start_time),
        error_code=error_code,
        message=message,
    )
