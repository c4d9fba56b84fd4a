"""
Unit tests for agreement, nDCG and rank-correlation statistics.
"""

import math

import numpy as np
import pytest

from src.reljudge.core.errors import (
    DataError,
    EmptyAlignmentError,
    GradeOutOfRangeError,
    NoOverlapError,
    UndefinedStatisticError,
)
from src.reljudge.core.metrics import (
    align,
    binarize,
    build_leaderboard,
    cohen_kappa,
    confusion,
    correlate_systems,
    evaluate_run,
    kendall_tau_b,
    ndcg_at_k,
    spearman_rho,
)
from src.reljudge.core.trec_io import Qrels, RunList


class TestAlign:
    """Test qrels alignment."""

    def test_fixture(self, human_qrels, expected_mock_qrels):
        """Identical key sets align completely."""
        labels = align(human_qrels, expected_mock_qrels)
        assert len(labels) == 12
        assert labels.human_only == labels.llm_only == 0
        assert labels.keys[0] == ("t1", "p01")
        assert labels.pairs[0] == (3, 3)

    def test_one_sided_keys_counted(self):
        """Keys judged by one side only are reported, not used."""
        labels = align(Qrels({"t": {"a": 1, "b": 2}}), Qrels({"t": {"b": 2, "c": 0}, "u": {"d": 1}}))
        assert labels.pairs == ((2, 2),)
        assert labels.human_only == 1
        assert labels.llm_only == 2

    def test_empty_intersection(self):
        """Disjoint qrels cannot be compared."""
        with pytest.raises(EmptyAlignmentError):
            align(Qrels({"t": {"a": 1}}), Qrels({"t": {"b": 1}}))


class TestConfusion:
    """Test confusion matrices."""

    def test_fixture(self, human_qrels, expected_mock_qrels):
        """Rows are human labels, columns llm labels."""
        matrix = confusion(align(human_qrels, expected_mock_qrels))
        assert matrix.to_lists() == [[2, 2, 0, 0], [1, 1, 1, 0], [0, 0, 2, 1], [0, 0, 0, 2]]
        assert matrix.total == 12
        assert matrix.observed_agreement == pytest.approx(7 / 12)
        assert matrix.per_label_accuracy() == pytest.approx({0: 0.5, 1: 1 / 3, 2: 2 / 3, 3: 1.0})

    def test_binary(self, human_qrels, expected_mock_qrels):
        """Binary scale collapses 0-1 and 2-3."""
        matrix = confusion(align(human_qrels, expected_mock_qrels), "binary")
        assert matrix.to_lists() == [[6, 1], [0, 5]]
        assert matrix.labels == (0, 1)

    def test_empty_rows(self):
        """Labels nobody used give zero rows and no accuracy."""
        matrix = confusion([(0, 0), (0, 1)])
        assert matrix.per_label_accuracy()[3] is None
        np.testing.assert_array_equal(matrix.row_normalized()[0], [0.5, 0.5, 0.0, 0.0])
        np.testing.assert_array_equal(matrix.row_normalized()[3], [0.0, 0.0, 0.0, 0.0])

    def test_frame_labels(self):
        """The data frame is labelled by rater and grade."""
        frame = confusion([(1, 2)]).to_frame()
        assert frame.loc["human=1", "llm=2"] == 1
        assert list(frame.columns) == ["llm=0", "llm=1", "llm=2", "llm=3"]

    def test_rejects_bad_grades(self):
        """Label pairs must be on the 0-3 scale."""
        with pytest.raises(GradeOutOfRangeError):
            confusion([(0, 4)])

    def test_binarize(self):
        """2 and 3 are relevant."""
        assert [binarize(g) for g in range(4)] == [0, 0, 1, 1]


class TestCohenKappa:
    """Test Cohen's kappa."""

    def test_fixture(self, human_qrels, expected_mock_qrels):
        """Fixture agreement is 48/108 on four grades and 60/72 binary."""
        labels = align(human_qrels, expected_mock_qrels)
        assert cohen_kappa(labels) == pytest.approx(48 / 108, abs=1e-12)
        assert cohen_kappa(labels, "binary") == pytest.approx(60 / 72, abs=1e-12)

    def test_perfect(self):
        """Identical labels give 1."""
        assert cohen_kappa([(0, 0), (1, 1), (3, 3)]) == 1.0

    def test_chance_level(self):
        """Independent marginals give 0."""
        assert cohen_kappa([(0, 0), (0, 1), (1, 0), (1, 1)]) == 0.0

    def test_single_shared_label(self):
        """Both raters using one label and agreeing is perfect agreement."""
        assert cohen_kappa([(2, 2), (2, 2)]) == 1.0

    def test_negative(self):
        """Systematic disagreement is below zero."""
        assert cohen_kappa([(0, 1), (1, 0)]) == -1.0

    def test_empty(self):
        """No pairs, no kappa."""
        with pytest.raises(UndefinedStatisticError):
            cohen_kappa([])

    def test_unknown_scale(self):
        """Only four-grade and binary scales exist."""
        with pytest.raises(DataError):
            cohen_kappa([(0, 0)], "five")


class TestNdcg:
    """Test nDCG@k."""

    def test_ideal_ranking(self):
        """Ranking by grade scores 1."""
        assert ndcg_at_k(["a", "b", "c"], {"a": 3, "b": 2, "c": 1}) == pytest.approx(1.0)

    def test_linear_gain(self):
        """A relevant passage at rank 2 is discounted by log2(3)."""
        assert ndcg_at_k(["x", "a"], {"a": 3}, k=2) == pytest.approx(1 / math.log2(3), abs=1e-12)

    def test_exponential_gain(self):
        """Exponential gain uses 2^g - 1."""
        expected = (3 + 7 / math.log2(3)) / (7 + 3 / math.log2(3))
        assert ndcg_at_k(["b", "a"], {"a": 3, "b": 2}, gain="exponential") == pytest.approx(expected, abs=1e-12)

    def test_cutoff(self):
        """Passages below k do not count, but the ideal is also cut at k."""
        assert ndcg_at_k(["x", "a"], {"a": 3}, k=1) == 0.0
        assert ndcg_at_k(["a", "x"], {"a": 3, "b": 3}, k=1) == 1.0

    def test_no_relevant_passages(self):
        """A topic with only grade-0 judgments scores 0."""
        assert ndcg_at_k(["a"], {"a": 0}) == 0.0

    def test_bad_k(self):
        """k must be positive."""
        with pytest.raises(DataError):
            ndcg_at_k(["a"], {"a": 1}, k=0)


class TestEvaluateRun:
    """Test per-run evaluation."""

    def test_ideal_run(self, runs, expected_mock_qrels):
        """runA is ideal under the mock qrels."""
        evaluation = evaluate_run(runs[0], expected_mock_qrels, k=10)
        assert evaluation.mean == pytest.approx(1.0)
        assert set(evaluation.per_topic) == {"t1", "t2", "t3"}

    def test_topic_intersection(self):
        """Qrels topics missing from the run are skipped unless complete_topics is set."""
        run = RunList(tag="r", rankings={"t1": [("a", 1, 1.0)]})
        qrels = Qrels({"t1": {"a": 2}, "t2": {"b": 1}})
        assert evaluate_run(run, qrels).mean == 1.0
        assert evaluate_run(run, qrels, complete_topics=True).mean == 0.5

    def test_no_overlap(self):
        """A run sharing no topic with the qrels is an error."""
        run = RunList(tag="r", rankings={"t9": [("a", 1, 1.0)]})
        with pytest.raises(NoOverlapError):
            evaluate_run(run, Qrels({"t1": {"a": 1}}))

    def test_leaderboard(self, runs, expected_mock_qrels):
        """Leaderboards are sorted by tag and rank the ideal run first by score."""
        board = build_leaderboard(runs, expected_mock_qrels)
        assert [entry.tag for entry in board.entries] == ["runA", "runB", "runC"]
        scores = board.scores()
        assert scores["runA"] > scores["runB"] > scores["runC"]

    def test_leaderboard_duplicate_tags(self, runs, expected_mock_qrels):
        """Run tags identify runs."""
        with pytest.raises(DataError):
            build_leaderboard([runs[0], runs[0]], expected_mock_qrels)


class TestRankCorrelation:
    """Test Kendall tau-b and Spearman rho."""

    def test_kendall(self):
        """One swapped pair out of three."""
        assert kendall_tau_b([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3, abs=1e-12)

    def test_kendall_ties(self):
        """Ties are corrected for in the denominator."""
        assert kendall_tau_b([1, 1, 2], [1, 2, 3]) == pytest.approx(2 / math.sqrt(6), abs=1e-12)

    def test_spearman(self):
        """rho of one swapped adjacent pair over three items."""
        assert spearman_rho([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)

    def test_reversed(self):
        """A fully reversed order correlates at -1."""
        assert kendall_tau_b([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)
        assert spearman_rho([1, 2, 3, 4], [4, 3, 2, 1]) == pytest.approx(-1.0)

    def test_constant_vector(self):
        """All-tied leaderboards are undefined."""
        with pytest.raises(UndefinedStatisticError):
            kendall_tau_b([1, 1, 1], [1, 2, 3])
        with pytest.raises(UndefinedStatisticError):
            spearman_rho([1, 2, 3], [0.5, 0.5, 0.5])

    def test_bad_input(self):
        """Vectors need equal length, two entries and finite values."""
        for x, y in [([1, 2], [1, 2, 3]), ([1], [1]), ([1, float("nan")], [1, 2])]:
            with pytest.raises(DataError):
                kendall_tau_b(x, y)


class TestCorrelateSystems:
    """Test leaderboard correlation between two qrels sets."""

    def test_fixture(self, runs, human_qrels, expected_mock_qrels):
        """Human and mock qrels order the fixture runs the same way."""
        report = correlate_systems(runs, human_qrels, expected_mock_qrels)
        assert report.kendall_tau == pytest.approx(1.0)
        assert report.spearman_rho == pytest.approx(1.0)
        assert [entry.run for entry in report.entries] == ["runA", "runB", "runC"]
        assert list(report.to_frame().columns) == ["run", "score_a", "score_b"]

    def test_ties_in_one_board(self):
        """Grade differences one qrels set lacks can leave the run order unchanged."""
        qrels_a = Qrels({"t": {"a": 3, "b": 1, "c": 0}})
        qrels_b = Qrels({"t": {"a": 3, "b": 0, "c": 0}})
        runs = [
            RunList(tag="x", rankings={"t": [("a", 1, 3.0), ("b", 2, 2.0), ("c", 3, 1.0)]}),
            RunList(tag="y", rankings={"t": [("b", 1, 3.0), ("a", 2, 2.0), ("c", 3, 1.0)]}),
            RunList(tag="z", rankings={"t": [("c", 1, 3.0), ("b", 2, 2.0), ("a", 3, 1.0)]}),
        ]
        report = correlate_systems(runs, qrels_a, qrels_b)
        assert report.kendall_tau == pytest.approx(1.0)
        assert report.spearman_rho == pytest.approx(1.0)

    def test_reversed_winner(self):
        """Two runs whose order flips correlate at -1."""
        qrels_a = Qrels({"t": {"a": 3, "b": 0}})
        qrels_b = Qrels({"t": {"a": 0, "b": 3}})
        runs = [
            RunList(tag="x", rankings={"t": [("a", 1, 2.0), ("b", 2, 1.0)]}),
            RunList(tag="y", rankings={"t": [("b", 1, 2.0), ("a", 2, 1.0)]}),
        ]
        report = correlate_systems(runs, qrels_a, qrels_b)
        assert report.kendall_tau == pytest.approx(-1.0)

    def test_too_few_runs(self, runs, human_qrels):
        """One run has no leaderboard order."""
        with pytest.raises(DataError):
            correlate_systems(runs[:1], human_qrels, human_qrels)

    def test_unevaluable_run(self, runs, human_qrels):
        """Every run must share a topic with both qrels sets."""
        with pytest.raises(NoOverlapError):
            correlate_systems(runs, human_qrels, Qrels({"t9": {"p01": 1}}))
