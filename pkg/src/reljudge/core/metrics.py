"""
Agreement and evaluation statistics.
Cohen's kappa and confusion matrices between two qrels sets, nDCG@k per run,
and Kendall tau-b / Spearman rho between two leaderboards.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import structlog
from pydantic import BaseModel, ConfigDict
from scipy import stats
from sklearn.metrics import confusion_matrix

from src.reljudge.core.errors import (
    DataError,
    EmptyAlignmentError,
    NoOverlapError,
    UndefinedStatisticError,
)
from src.reljudge.core.trec_io import Grade, Qrels, RunList

logger = structlog.get_logger()

Scale = Literal["four", "binary"]
GainMode = Literal["linear", "exponential"]
LabelPair = Tuple[int, int]

FOUR_LABELS = (0, 1, 2, 3)
BINARY_LABELS = (0, 1)


# =============================================================================
# Label agreement
# =============================================================================


@dataclass(frozen=True)
class AlignedLabels:
    """(human, llm) grade pairs over the keys both qrels sets judge, sorted by key."""

    pairs: Tuple[LabelPair, ...]
    keys: Tuple[Tuple[str, str], ...]
    human_only: int
    llm_only: int

    def __len__(self) -> int:
        return len(self.pairs)


def align(human: Qrels, llm: Qrels) -> AlignedLabels:
    """Intersect two qrels sets on (topic, passage); one-sided keys are only counted."""
    human_keys = {(t, p) for t, p, _ in human.iter_entries()}
    llm_keys = {(t, p) for t, p, _ in llm.iter_entries()}
    common = sorted(human_keys & llm_keys)
    if not common:
        raise EmptyAlignmentError("the two qrels sets share no (topic, passage) pair")
    pairs = tuple((int(human[t][p]), int(llm[t][p])) for t, p in common)
    aligned = AlignedLabels(
        pairs=pairs,
        keys=tuple(common),
        human_only=len(human_keys - llm_keys),
        llm_only=len(llm_keys - human_keys),
    )
    logger.info(
        "Qrels aligned",
        common=len(common),
        human_only=aligned.human_only,
        llm_only=aligned.llm_only,
    )
    return aligned


def binarize(grade: int) -> int:
    """0 and 1 are non-relevant, 2 and 3 relevant."""
    return 1 if Grade(grade) >= Grade.HIGHLY_RELEVANT else 0


def _label_pairs(labels: Union[AlignedLabels, Sequence[LabelPair]], scale: Scale) -> List[LabelPair]:
    pairs = list(labels.pairs if isinstance(labels, AlignedLabels) else labels)
    for human, llm in pairs:
        Grade(human)
        Grade(llm)
    if scale == "binary":
        return [(binarize(h), binarize(l)) for h, l in pairs]
    if scale != "four":
        raise DataError(f"unknown scale {scale!r}")
    return pairs


class ConfusionMatrix:
    """Counts of (human grade, llm grade); rows are human labels, columns llm labels."""

    def __init__(self, counts: np.ndarray, labels: Sequence[int]):
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (len(labels), len(labels)):
            raise DataError(f"confusion counts must be {len(labels)}x{len(labels)}")
        if (counts < 0).any():
            raise DataError("confusion counts must be non-negative")
        counts.setflags(write=False)
        self.counts = counts
        self.labels = tuple(int(label) for label in labels)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def observed_agreement(self) -> float:
        if self.total == 0:
            raise UndefinedStatisticError("observed agreement of an empty matrix")
        return int(np.trace(self.counts)) / self.total

    def row_normalized(self) -> np.ndarray:
        """Each row divided by its sum; rows without pairs stay all zero."""
        row_sums = self.counts.sum(axis=1, keepdims=True)
        return np.divide(
            self.counts, row_sums, out=np.zeros(self.counts.shape, dtype=float), where=row_sums > 0
        )

    def per_label_accuracy(self) -> Dict[int, Optional[float]]:
        """Share of each human label the llm reproduced; None for labels with no pairs."""
        row_sums = self.counts.sum(axis=1)
        return {
            label: (int(self.counts[i, i]) / int(row_sums[i]) if row_sums[i] else None)
            for i, label in enumerate(self.labels)
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            self.counts,
            index=pd.Index([f"human={label}" for label in self.labels]),
            columns=[f"llm={label}" for label in self.labels],
        )

    def to_lists(self) -> List[List[int]]:
        return self.counts.tolist()

    def __repr__(self) -> str:
        return f"ConfusionMatrix(labels={self.labels}, total={self.total})"


def confusion(labels: Union[AlignedLabels, Sequence[LabelPair]], scale: Scale = "four") -> ConfusionMatrix:
    pairs = _label_pairs(labels, scale)
    label_set = BINARY_LABELS if scale == "binary" else FOUR_LABELS
    if not pairs:
        return ConfusionMatrix(np.zeros((len(label_set), len(label_set)), dtype=np.int64), label_set)
    human, llm = zip(*pairs)
    counts = confusion_matrix(list(human), list(llm), labels=list(label_set))
    return ConfusionMatrix(counts, label_set)


def cohen_kappa(labels: Union[AlignedLabels, Sequence[LabelPair]], scale: Scale = "four") -> float:
    """
    Cohen's kappa, (p_o - p_e) / (1 - p_e).

    Evaluated from integer confusion counts as
    (n * trace - sum(row_g * col_g)) / (n^2 - sum(row_g * col_g)),
    so the only rounding is the final division. When p_e is 1 both raters
    used one single label: kappa is 1.0 if they also agree, otherwise undefined.
    """
    matrix = confusion(labels, scale)
    n = matrix.total
    if n == 0:
        raise UndefinedStatisticError("kappa needs at least one label pair")
    counts = matrix.counts
    trace = int(np.trace(counts))
    chance = sum(int(r) * int(c) for r, c in zip(counts.sum(axis=1), counts.sum(axis=0)))
    denominator = n * n - chance
    if denominator == 0:
        if trace == n:
            return 1.0
        raise UndefinedStatisticError("kappa is undefined: expected agreement is 1 without perfect agreement")
    return (n * trace - chance) / denominator


# =============================================================================
# nDCG
# =============================================================================


def _gains(grades: Sequence[int], gain: GainMode) -> np.ndarray:
    values = np.asarray(grades, dtype=float)
    if gain == "exponential":
        return np.power(2.0, values) - 1.0
    if gain != "linear":
        raise DataError(f"unknown gain mode {gain!r}")
    return values


def _dcg(gains: np.ndarray) -> float:
    if gains.size == 0:
        return 0.0
    discounts = np.log2(np.arange(2, gains.size + 2, dtype=float))
    return float(np.sum(gains / discounts))


def ndcg_at_k(
    ranked_passages: Sequence[str],
    judged: Dict[str, int],
    k: int = 10,
    *,
    gain: GainMode = "linear",
) -> float:
    """
    nDCG@k of one ranked list against one topic's judgments.

    Unjudged passages gain 0. A topic without any positive grade has IDCG 0
    and scores 0.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    ranked_grades = [int(judged.get(pid, 0)) for pid in list(ranked_passages)[:k]]
    ideal_grades = sorted((int(g) for g in judged.values()), reverse=True)[:k]
    idcg = _dcg(_gains(ideal_grades, gain))
    if idcg == 0.0:
        return 0.0
    return _dcg(_gains(ranked_grades, gain)) / idcg


class RunEvaluation(BaseModel):
    model_config = ConfigDict(frozen=True)

    tag: str
    k: int
    per_topic: Dict[str, float]
    mean: float


def evaluate_run(
    run: RunList,
    qrels: Qrels,
    k: int = 10,
    *,
    gain: GainMode = "linear",
    complete_topics: bool = False,
) -> RunEvaluation:
    """
    nDCG@k per topic and its unweighted mean.

    By default only topics in both run and qrels count. With complete_topics,
    every qrels topic counts and topics the run skipped score 0.
    """
    shared = [topic_id for topic_id in sorted(qrels) if topic_id in run.rankings]
    if not shared:
        raise NoOverlapError(f"run {run.tag} shares no topic with the qrels")
    topics = sorted(qrels) if complete_topics else shared
    per_topic = {
        topic_id: ndcg_at_k(run.passage_ids(topic_id), dict(qrels[topic_id]), k, gain=gain)
        for topic_id in topics
    }
    mean = float(np.mean(list(per_topic.values())))
    return RunEvaluation(tag=run.tag, k=k, per_topic=per_topic, mean=mean)


class LeaderboardEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    tag: str
    score: float
    topics: int


class Leaderboard(BaseModel):
    """Mean nDCG@k per run under one qrels set, sorted by run tag."""

    model_config = ConfigDict(frozen=True)

    k: int
    entries: List[LeaderboardEntry]

    def scores(self) -> Dict[str, float]:
        return {entry.tag: entry.score for entry in self.entries}


def build_leaderboard(
    runs: Iterable[RunList],
    qrels: Qrels,
    k: int = 10,
    *,
    gain: GainMode = "linear",
) -> Leaderboard:
    entries = []
    seen = set()
    for run in sorted(runs, key=lambda r: r.tag):
        if run.tag in seen:
            raise DataError(f"run tag {run.tag!r} appears twice")
        seen.add(run.tag)
        evaluation = evaluate_run(run, qrels, k, gain=gain)
        entries.append(LeaderboardEntry(tag=run.tag, score=evaluation.mean, topics=len(evaluation.per_topic)))
    return Leaderboard(k=k, entries=entries)


# =============================================================================
# Rank correlation
# =============================================================================


def _as_vectors(x: Sequence[float], y: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    xs = np.asarray(x, dtype=float)
    ys = np.asarray(y, dtype=float)
    if xs.ndim != 1 or ys.ndim != 1 or xs.shape != ys.shape:
        raise DataError("correlation needs two vectors of equal length")
    if xs.size < 2:
        raise DataError("correlation needs at least 2 values per vector")
    if not (np.isfinite(xs).all() and np.isfinite(ys).all()):
        raise DataError("correlation inputs must be finite")
    return xs, ys


def kendall_tau_b(x: Sequence[float], y: Sequence[float]) -> float:
    """Tie-corrected Kendall tau (variant b)."""
    xs, ys = _as_vectors(x, y)
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise UndefinedStatisticError("tau-b is undefined when a vector is constant")
    return float(stats.kendalltau(xs, ys, variant="b").statistic)


def spearman_rho(x: Sequence[float], y: Sequence[float]) -> float:
    """Pearson correlation of average ranks."""
    xs, ys = _as_vectors(x, y)
    if np.all(xs == xs[0]) or np.all(ys == ys[0]):
        raise UndefinedStatisticError("rho is undefined when a rank vector has zero variance")
    return float(stats.spearmanr(xs, ys).statistic)


class PairedScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    run: str
    score_a: float
    score_b: float


class CorrelationReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    kendall_tau: float
    spearman_rho: float
    k: int
    entries: List[PairedScore]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [entry.model_dump() for entry in self.entries], columns=["run", "score_a", "score_b"]
        )


def correlate_systems(
    runs: Sequence[RunList],
    qrels_a: Qrels,
    qrels_b: Qrels,
    k: int = 10,
    *,
    gain: GainMode = "linear",
) -> CorrelationReport:
    """Correlate the leaderboards two qrels sets produce over the same runs."""
    if len(runs) < 2:
        raise DataError(f"correlation needs at least 2 runs, got {len(runs)}")
    for run in runs:
        evaluable = []
        for qrels in (qrels_a, qrels_b):
            evaluable.append(any(topic_id in qrels for topic_id in run.rankings))
        if not all(evaluable):
            raise NoOverlapError(f"run {run.tag} cannot be evaluated under both qrels sets")

    board_a = build_leaderboard(runs, qrels_a, k, gain=gain)
    board_b = build_leaderboard(runs, qrels_b, k, gain=gain)
    scores_b = board_b.scores()
    entries = [
        PairedScore(run=entry.tag, score_a=entry.score, score_b=scores_b[entry.tag])
        for entry in board_a.entries
    ]
    xs = [entry.score_a for entry in entries]
    ys = [entry.score_b for entry in entries]
    report = CorrelationReport(kendall_tau=kendall_tau_b(xs, ys), spearman_rho=spearman_rho(xs, ys), k=k, entries=entries)
    logger.info(
        "Leaderboards correlated",
        runs=len(entries),
        kendall_tau=round(report.kendall_tau, 4),
        spearman_rho=round(report.spearman_rho, 4),
    )
    return report
