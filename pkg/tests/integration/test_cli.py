"""
Integration tests for the reljudge command line.
Commands run in-process through main(); judging uses the mock backend.
"""

import shutil
from unittest.mock import patch

import pandas as pd
import pytest

from src.reljudge.cli.main import main
from src.reljudge.cli.reports import (
    AgreementReport,
    ClustersReport,
    CorrelateReport,
    DedupReport,
    ErrorReport,
    JudgeReport,
    StatsReport,
)
from src.reljudge.core.dedup import parse_clusters, write_clusters
from src.reljudge.core.trec_io import parse_qrels

pytestmark = pytest.mark.integration


@pytest.fixture
def judge_args(fixtures_dir, tmp_path):
    """Arguments for a mock judging job over the human qrels pool."""
    return [
        "judge",
        "--topics", str(fixtures_dir / "topics.tsv"),
        "--corpus", str(fixtures_dir / "corpus.jsonl"),
        "--pool-qrels", str(fixtures_dir / "qrels_human.txt"),
        "--out", str(tmp_path / "out" / "qrels_llm.txt"),
        "--backend", "mock",
    ]


class TestGlobal:
    """Test global options and usage errors."""

    def test_version(self, capsys):
        """--version prints and exits 0."""
        assert main(["--version"]) == 0
        assert "reljudge" in capsys.readouterr().out

    def test_missing_command(self):
        """A command is required."""
        assert main([]) == 1

    def test_unknown_option(self, fixtures_dir):
        """Unknown options are usage errors."""
        assert main(["stats", str(fixtures_dir / "qrels_human.txt"), "--bogus"]) == 1


class TestStats:
    """Test the stats command."""

    def test_text(self, fixtures_dir, capsys):
        """Histogram lines on stdout."""
        assert main(["stats", str(fixtures_dir / "qrels_human.txt")]) == 0
        out = capsys.readouterr().out
        assert "label 0: 4" in out
        assert "label 3: 2" in out
        assert "topics: 3" in out

    def test_json(self, fixtures_dir, capsys):
        """--json prints a StatsReport."""
        assert main(["stats", str(fixtures_dir / "qrels_human.txt"), "--json"]) == 0
        report = StatsReport.model_validate_json(capsys.readouterr().out)
        assert report.status == "ok"
        assert report.histogram.counts == {0: 4, 1: 3, 2: 3, 3: 2}

    def test_missing_file(self, tmp_path):
        """Unreadable input is a data error."""
        assert main(["stats", str(tmp_path / "none.txt")]) == 2

    def test_malformed_file(self, tmp_path, capsys):
        """Parse errors name the line and produce an error report."""
        path = tmp_path / "bad.txt"
        path.write_text("t1 0 a 1\nt1 0 b five\n")
        assert main(["stats", str(path), "--json"]) == 2
        captured = capsys.readouterr()
        assert "line 2" in captured.err
        report = ErrorReport.model_validate_json(captured.out)
        assert report.status == "error"
        assert report.error_code == "DATA_ERROR"

    def test_invalid_utf8(self, tmp_path, capsys):
        """Undecodable bytes are a data error naming the line."""
        path = tmp_path / "binary.txt"
        path.write_bytes(b"t1 Q0 p01 1\nt1 Q0 p02 \xff\xfe\n")
        assert main(["stats", str(path), "--json"]) == 2
        captured = capsys.readouterr()
        assert "line 2" in captured.err
        report = ErrorReport.model_validate_json(captured.out)
        assert report.error_code == "DATA_ERROR"

    def test_dedup_policy(self, fixtures_dir, tmp_path, capsys):
        """Repeated judgments fail by default and keep the last grade with --dedup-policy last."""
        path = tmp_path / "qrels.txt"
        path.write_text((fixtures_dir / "qrels_human.txt").read_text() + "t1 0 p01 0\n")
        assert main(["stats", str(path)]) == 2
        capsys.readouterr()
        assert main(["stats", str(path), "--dedup-policy", "last", "--json"]) == 0
        report = StatsReport.model_validate_json(capsys.readouterr().out)
        assert report.histogram.total == 12


class TestJudge:
    """Test the judge command."""

    def test_mock_job(self, judge_args, fixtures_dir, tmp_path, capsys):
        """A mock job writes the expected qrels and an audit log next to them."""
        assert main(judge_args + ["--json"]) == 0
        report = JudgeReport.model_validate_json(capsys.readouterr().out)
        assert report.summary.judged == 12
        assert report.summary.failures == 0

        out = tmp_path / "out" / "qrels_llm.txt"
        assert out.read_text() == (fixtures_dir / "qrels_mock_expected.txt").read_text()
        assert report.audit_log == str(tmp_path / "out" / "judgments.jsonl")
        assert (tmp_path / "out" / "judgments.jsonl").exists()

    def test_resume(self, judge_args, capsys):
        """A second run reuses every logged judgment."""
        assert main(judge_args) == 0
        capsys.readouterr()
        assert main(judge_args + ["--json"]) == 0
        report = JudgeReport.model_validate_json(capsys.readouterr().out)
        assert report.summary.resumed == 12
        assert report.summary.judged == 0

    def test_backend_from_env(self, judge_args, monkeypatch, capsys):
        """LLM settings fall back to RELJUDGE_* variables."""
        monkeypatch.setenv("RELJUDGE_BACKEND", "mock")
        monkeypatch.delenv("OPENAI_API_KEY", raising=False)
        args = [a for a in judge_args if a not in ("--backend", "mock")]
        assert main(args) == 0

    def test_pool_runs(self, fixtures_dir, tmp_path, capsys):
        """Run pools need a depth."""
        base = [
            "judge",
            "--topics", str(fixtures_dir / "topics.tsv"),
            "--corpus", str(fixtures_dir / "corpus.jsonl"),
            "--pool-runs", str(fixtures_dir / "runs"),
            "--out", str(tmp_path / "qrels.txt"),
            "--backend", "mock",
        ]
        assert main(base) == 1
        assert main(base + ["--depth", "1", "--json"]) == 0
        report = JudgeReport.model_validate_json(capsys.readouterr().out)
        qrels = parse_qrels((tmp_path / "qrels.txt").read_text())
        assert report.summary.pool_size == qrels.n_entries
        assert qrels.get_grade("t1", "p01") == 3

    def test_depth_with_qrels_pool(self, judge_args):
        """--depth is only for run pools."""
        assert main(judge_args + ["--depth", "5"]) == 1

    def test_both_pools(self, judge_args, fixtures_dir):
        """Pool sources are mutually exclusive."""
        assert main(judge_args + ["--pool-runs", str(fixtures_dir / "runs"), "--depth", "1"]) == 1

    def test_invalid_llm_setting(self, judge_args):
        """Out-of-range settings are usage errors."""
        assert main(judge_args + ["--mock-noise-rate", "2"]) == 1

    def test_unresolvable_pool(self, judge_args, tmp_path):
        """Pool pairs outside the corpus fail before judging."""
        pool = tmp_path / "pool.txt"
        pool.write_text("t1 0 p99 1\n")
        args = list(judge_args)
        args[args.index("--pool-qrels") + 1] = str(pool)
        assert main(args) == 2

    def test_missing_api_key(self, judge_args, monkeypatch, capsys):
        """The remote backend without a key is an LLM error."""
        monkeypatch.delenv("OPENAI_API_KEY", raising=False)
        args = [a for a in judge_args if a not in ("--backend", "mock")]
        assert main(args + ["--json"]) == 3
        report = ErrorReport.model_validate_json(capsys.readouterr().out)
        assert report.error_code == "LLM_ERROR"
        assert "OPENAI_API_KEY" in report.message

    def test_custom_template(self, judge_args, tmp_path):
        """An invalid template is a data error."""
        template = tmp_path / "template.txt"
        template.write_text("Query: {query}\n##final score: g\n")
        assert main(judge_args + ["--template", str(template)]) == 2


class TestDedup:
    """Test dedup and convert-clusters."""

    def test_dedup(self, fixtures_dir, tmp_path, capsys):
        """Non-canonical passages leave qrels and runs."""
        out_dir = tmp_path / "deduped"
        args = [
            "dedup",
            "--qrels", str(fixtures_dir / "qrels_human.txt"),
            "--clusters", str(fixtures_dir / "clusters.tsv"),
            "--runs", str(fixtures_dir / "runs"),
            "--out-dir", str(out_dir),
            "--json",
        ]
        assert main(args) == 0
        report = DedupReport.model_validate_json(capsys.readouterr().out)
        assert report.before.total == 12
        assert report.after.total == 9
        assert [(c.run, c.entries_after) for c in report.runs] == [("runA", 9), ("runB", 9), ("runC", 9)]

        assert parse_qrels((out_dir / "qrels_human.txt").read_text()).n_entries == 9
        assert sorted(p.name for p in (out_dir / "runs").iterdir()) == ["run_a.txt", "run_b.txt", "run_c.txt"]

    def test_dedup_with_pairs(self, fixtures_dir, tmp_path, capsys):
        """The pair format gives the same result as the TSV."""
        args = [
            "dedup",
            "--qrels", str(fixtures_dir / "qrels_human.txt"),
            "--clusters", str(fixtures_dir / "duplicate_pairs.txt"),
            "--clusters-format", "pairs",
            "--out-dir", str(tmp_path),
            "--json",
        ]
        assert main(args) == 0
        assert DedupReport.model_validate_json(capsys.readouterr().out).after.total == 9

    def test_bad_clusters(self, fixtures_dir, tmp_path):
        """Overlapping clusters are a data error."""
        clusters = tmp_path / "clusters.tsv"
        clusters.write_text("p01\tp02\np05\tp02\n")
        args = ["dedup", "--qrels", str(fixtures_dir / "qrels_human.txt"), "--clusters", str(clusters),
                "--out-dir", str(tmp_path / "out")]
        assert main(args) == 2

    def test_convert_clusters(self, fixtures_dir, tmp_path, capsys):
        """Pairs convert to the cluster TSV."""
        out = tmp_path / "clusters.tsv"
        args = ["convert-clusters", "--pairs", str(fixtures_dir / "duplicate_pairs.txt"), "--out", str(out), "--json"]
        assert main(args) == 0
        report = ClustersReport.model_validate_json(capsys.readouterr().out)
        assert report.clusters == 2
        assert report.passages == 5
        expected = write_clusters(parse_clusters((fixtures_dir / "clusters.tsv").read_text()))
        assert out.read_text() == expected

    def test_strict_scores(self, fixtures_dir, tmp_path):
        """Runs with scores rising down the ranking fail only with --strict-scores."""
        runs = tmp_path / "runs"
        shutil.copytree(fixtures_dir / "runs", runs)
        (runs / "run_d.txt").write_text("t1 Q0 p01 1 1.0 runD\nt1 Q0 p02 2 2.0 runD\n")
        args = ["dedup", "--qrels", str(fixtures_dir / "qrels_human.txt"), "--clusters",
                str(fixtures_dir / "clusters.tsv"), "--runs", str(runs), "--out-dir", str(tmp_path / "out")]
        assert main(args) == 0
        assert main(args + ["--strict-scores"]) == 2

    def test_dedup_policy(self, fixtures_dir, tmp_path):
        """dedup reads qrels with the chosen duplicate policy."""
        qrels = tmp_path / "qrels.txt"
        qrels.write_text((fixtures_dir / "qrels_human.txt").read_text() + "t1 0 p01 0\n")
        args = ["dedup", "--qrels", str(qrels), "--clusters", str(fixtures_dir / "clusters.tsv"),
                "--out-dir", str(tmp_path / "out")]
        assert main(args) == 2
        assert main(args + ["--dedup-policy", "last"]) == 0


class TestAgreement:
    """Test the agreement command."""

    def test_json(self, fixtures_dir, capsys):
        """Kappa and confusion of human against mock labels."""
        args = ["agreement", str(fixtures_dir / "qrels_human.txt"), str(fixtures_dir / "qrels_mock_expected.txt"),
                "--binary", "--json"]
        assert main(args) == 0
        report = AgreementReport.model_validate_json(capsys.readouterr().out)
        assert report.kappa == pytest.approx(48 / 108, abs=1e-12)
        assert report.kappa_binary == pytest.approx(60 / 72, abs=1e-12)
        assert report.confusion == [[2, 2, 0, 0], [1, 1, 1, 0], [0, 0, 2, 1], [0, 0, 0, 2]]
        assert report.binary_confusion == [[6, 1], [0, 5]]
        assert report.coverage.aligned == 12
        assert report.per_label_accuracy[3] == 1.0

    def test_text_and_csv(self, fixtures_dir, tmp_path, capsys):
        """Text output and the CSV matrix."""
        csv_path = tmp_path / "confusion.csv"
        args = ["agreement", str(fixtures_dir / "qrels_human.txt"), str(fixtures_dir / "qrels_mock_expected.txt"),
                "--csv", str(csv_path)]
        assert main(args) == 0
        assert "kappa (4-scale): 0.4444" in capsys.readouterr().out
        frame = pd.read_csv(csv_path, index_col=0)
        assert frame.loc["human=0", "llm=1"] == 2

    def test_disjoint(self, fixtures_dir, tmp_path):
        """Qrels without shared pairs are a data error."""
        other = tmp_path / "other.txt"
        other.write_text("t9 0 x 1\n")
        assert main(["agreement", str(fixtures_dir / "qrels_human.txt"), str(other)]) == 2


class TestCorrelate:
    """Test the correlate command."""

    def test_fixture(self, fixtures_dir, tmp_path, capsys):
        """Human and mock qrels order the fixture runs identically."""
        scatter = tmp_path / "scatter.csv"
        args = ["correlate", str(fixtures_dir / "qrels_human.txt"), str(fixtures_dir / "qrels_mock_expected.txt"),
                "--runs", str(fixtures_dir / "runs"), "--scatter", str(scatter), "--json"]
        assert main(args) == 0
        report = CorrelateReport.model_validate_json(capsys.readouterr().out)
        assert report.correlation.kendall_tau == pytest.approx(1.0)
        assert report.correlation.spearman_rho == pytest.approx(1.0)
        frame = pd.read_csv(scatter)
        assert list(frame.columns) == ["run", "score_a", "score_b"]
        assert list(frame["run"]) == ["runA", "runB", "runC"]

    def test_malformed_run_skipped(self, fixtures_dir, tmp_path, capsys):
        """Unparseable run files are skipped with a warning."""
        runs = tmp_path / "runs"
        shutil.copytree(fixtures_dir / "runs", runs)
        (runs / "broken.txt").write_text("this is not a run\n")
        args = ["correlate", str(fixtures_dir / "qrels_human.txt"), str(fixtures_dir / "qrels_mock_expected.txt"),
                "--runs", str(runs), "--json"]
        assert main(args) == 0
        report = CorrelateReport.model_validate_json(capsys.readouterr().out)
        assert len(report.correlation.entries) == 3

    def test_too_few_runs(self, fixtures_dir, tmp_path):
        """One run cannot be correlated."""
        runs = tmp_path / "runs"
        runs.mkdir()
        shutil.copy(fixtures_dir / "runs" / "run_a.txt", runs)
        args = ["correlate", str(fixtures_dir / "qrels_human.txt"), str(fixtures_dir / "qrels_mock_expected.txt"),
                "--runs", str(runs)]
        assert main(args) == 2

    def test_strict_scores(self, fixtures_dir, tmp_path, capsys):
        """With --strict-scores a run with rising scores is skipped like any malformed run."""
        runs = tmp_path / "runs"
        shutil.copytree(fixtures_dir / "runs", runs)
        (runs / "run_d.txt").write_text("t1 Q0 p01 1 1.0 runD\nt1 Q0 p02 2 2.0 runD\n")
        args = ["correlate", str(fixtures_dir / "qrels_human.txt"), str(fixtures_dir / "qrels_mock_expected.txt"),
                "--runs", str(runs), "--json"]
        assert main(args) == 0
        assert len(CorrelateReport.model_validate_json(capsys.readouterr().out).correlation.entries) == 4
        assert main(args + ["--strict-scores"]) == 0
        assert len(CorrelateReport.model_validate_json(capsys.readouterr().out).correlation.entries) == 3


class TestPipeline:
    """Chain the commands the way a judging study uses them."""

    def test_judge_then_compare_with_itself(self, judge_args, fixtures_dir, tmp_path, capsys):
        """LLM qrels from judge agree perfectly with themselves and rank runs identically."""
        assert main(judge_args) == 0
        capsys.readouterr()
        out = str(tmp_path / "out" / "qrels_llm.txt")

        assert main(["agreement", out, out, "--binary", "--json"]) == 0
        agreement = AgreementReport.model_validate_json(capsys.readouterr().out)
        assert agreement.kappa == 1.0
        assert agreement.kappa_binary == 1.0
        assert agreement.coverage.aligned == 12

        assert main(["correlate", out, out, "--runs", str(fixtures_dir / "runs"), "--json"]) == 0
        correlation = CorrelateReport.model_validate_json(capsys.readouterr().out).correlation
        assert correlation.kendall_tau == pytest.approx(1.0)
        assert correlation.spearman_rho == pytest.approx(1.0)
        assert [e.score_a for e in correlation.entries] == [e.score_b for e in correlation.entries]


class TestServeMock:
    """Test the serve-mock command without binding a port."""

    def test_starts_uvicorn(self):
        """The mock app is handed to uvicorn with the requested address."""
        with patch("uvicorn.run") as run:
            assert main(["serve-mock", "--port", "8123", "--fail-first", "2", "--fault-status", "503"]) == 0
        app = run.call_args.args[0]
        assert run.call_args.kwargs["port"] == 8123
        assert run.call_args.kwargs["host"] == "127.0.0.1"
        assert app.state.endpoint.requests_total == 0

    def test_missing_key_variable(self, monkeypatch):
        """--api-key-env must name a set variable."""
        monkeypatch.delenv("MOCK_KEY", raising=False)
        with patch("uvicorn.run") as run:
            assert main(["serve-mock", "--api-key-env", "MOCK_KEY"]) == 1
        run.assert_not_called()
