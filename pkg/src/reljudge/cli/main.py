"""
reljudge command-line interface.
Subcommands tie the toolkit together: judge, stats, dedup, convert-clusters,
agreement, correlate and serve-mock. Results go to stdout, logs to stderr.

Exit codes: 0 success, 1 usage error, 2 data error, 3 LLM/remote error,
4 unexpected failure.
"""

import argparse
import asyncio
import logging
import os
import sys
import time
from pathlib import Path
from typing import Callable, Dict, List, Optional

import pandas as pd
import structlog
from dotenv import load_dotenv
from pydantic import ValidationError

from src.reljudge import __version__
from src.reljudge.cli.reports import (
    AgreementReport,
    ClustersReport,
    CorrelateReport,
    Coverage,
    DedupReport,
    JudgeReport,
    Report,
    RunDedupCount,
    StatsReport,
    diagnostics_for,
    error_report,
)
from src.reljudge.core.corpus import load_corpus
from src.reljudge.core.dedup import (
    DupClusters,
    clusters_from_pairs,
    dedup_qrels,
    dedup_run,
    parse_clusters,
    write_clusters,
)
from src.reljudge.core.errors import (
    DataError,
    LLMError,
    RelJudgeError,
    ResponseParseError,
    UsageError,
)
from src.reljudge.core.judge_pipeline import judge_pool, pool_from_qrels, pool_from_runs
from src.reljudge.core.metrics import align, cohen_kappa, confusion, correlate_systems
from src.reljudge.core.prompt import PromptTemplate
from src.reljudge.core.trec_io import (
    Qrels,
    load_run_files,
    load_runs_dir,
    parse_qrels,
    parse_topics,
    qrels_stats,
    read_text_file,
    write_qrels,
    write_run,
)
from src.reljudge.services.llm_config import LLMConfig

logger = structlog.get_logger()

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_LLM = 3
EXIT_INTERNAL = 4

# CLI flag -> LLMConfig field; unset flags fall back to RELJUDGE_* env vars, then defaults
LLM_FLAGS = {
    "backend": "backend",
    "model": "model_name",
    "endpoint": "endpoint_url",
    "api_key_env": "api_key_source",
    "temperature": "temperature",
    "top_p": "top_p",
    "frequency_penalty": "frequency_penalty",
    "presence_penalty": "presence_penalty",
    "max_output_tokens": "max_output_tokens",
    "timeout": "request_timeout",
    "max_retries": "max_retries",
    "max_in_flight": "max_in_flight",
    "cache_dir": "cache_dir",
    "mock_seed": "mock_seed",
    "mock_noise_rate": "mock_noise_rate",
}


def configure_logging(level: str = "INFO") -> None:
    """Structured JSON logs on stderr."""
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, level.upper(), logging.INFO),
        force=True,
    )
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.stdlib.PositionalArgumentsFormatter(),
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.StackInfoRenderer(),
            structlog.processors.format_exc_info,
            structlog.processors.UnicodeDecoder(),
            structlog.processors.JSONRenderer(),
        ],
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


class CommandParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with EXIT_USAGE."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return number


def _read(path: Path) -> str:
    return read_text_file(path)


def _load_qrels(path: Path, args: argparse.Namespace) -> Qrels:
    return parse_qrels(_read(path), on_duplicate=args.dedup_policy, source=str(path))


def _emit(args: argparse.Namespace, report: Report, text: str) -> None:
    if getattr(args, "json", False):
        print(report.model_dump_json(indent=2))
    else:
        print(text)


def _table(frame: pd.DataFrame, **kwargs) -> str:
    return frame.to_string(**kwargs)


# =============================================================================
# Commands
# =============================================================================


def cmd_stats(args: argparse.Namespace, start_time: float) -> int:
    qrels = _load_qrels(args.qrels, args)
    histogram = qrels_stats(qrels)
    report = StatsReport(
        command="stats",
        diagnostics=diagnostics_for("stats", start_time),
        qrels=str(args.qrels),
        histogram=histogram,
    )
    lines = [f"label {grade}: {count}" for grade, count in sorted(histogram.counts.items())]
    lines += [f"topics: {histogram.topics}", f"total: {histogram.total}"]
    _emit(args, report, "\n".join(lines))
    return EXIT_OK


def _llm_config(args: argparse.Namespace) -> LLMConfig:
    overrides = {
        field: getattr(args, flag)
        for flag, field in LLM_FLAGS.items()
        if getattr(args, flag, None) is not None
    }
    try:
        return LLMConfig(**overrides)
    except ValidationError as e:
        raise UsageError(f"invalid LLM settings: {e}") from e


def cmd_judge(args: argparse.Namespace, start_time: float) -> int:
    if args.pool_runs is not None and args.depth is None:
        raise UsageError("--pool-runs needs --depth")
    if args.pool_qrels is not None and args.depth is not None:
        raise UsageError("--depth only applies to --pool-runs")

    config = _llm_config(args)
    topics = parse_topics(_read(args.topics), source=str(args.topics))
    if args.pool_qrels is not None:
        pool = pool_from_qrels(_load_qrels(args.pool_qrels, args))
    else:
        pool = pool_from_runs(load_runs_dir(args.pool_runs, strict_scores=args.strict_scores), args.depth)
    template = PromptTemplate.from_file(Path(args.template)) if args.template else None
    audit_log = Path(args.audit_log) if args.audit_log else Path(args.out).parent / "judgments.jsonl"

    with load_corpus(
        Path(args.corpus),
        indexed=args.corpus_indexed,
        id_field=args.id_field,
        text_field=args.text_field,
    ) as corpus:
        outcome = asyncio.run(
            judge_pool(
                pool,
                topics,
                corpus,
                config,
                log_path=audit_log,
                retry_failed=args.retry_failed,
                template=template,
            )
        )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(write_qrels(outcome.qrels), encoding="utf-8")

    summary = outcome.summary
    report = JudgeReport(
        command="judge",
        diagnostics=diagnostics_for("judge", start_time),
        qrels_out=str(out),
        audit_log=str(audit_log),
        summary=summary,
    )
    frame = pd.DataFrame(
        [
            {
                "pool": summary.pool_size,
                "judged": summary.judged,
                "resumed": summary.resumed,
                "failures": summary.failures,
                "transport": summary.transport_failures,
                "parse": summary.parse_failures,
                "cache_hits": summary.cache_hits,
            }
        ]
    )
    _emit(args, report, _table(frame, index=False))

    if summary.transport_failures:
        logger.error(
            "Some pairs failed at the LLM endpoint; rerun with --retry-failed",
            transport_failures=summary.transport_failures,
        )
        return EXIT_LLM
    return EXIT_OK


def _load_clusters(path: Path, clusters_format: str) -> DupClusters:
    if clusters_format == "pairs":
        return clusters_from_pairs(_read(path), source=str(path))
    return parse_clusters(_read(path), source=str(path))


def cmd_dedup(args: argparse.Namespace, start_time: float) -> int:
    clusters = _load_clusters(args.clusters, args.clusters_format)
    qrels = _load_qrels(args.qrels, args)
    deduped = dedup_qrels(qrels, clusters)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / Path(args.qrels).name).write_text(write_qrels(deduped), encoding="utf-8")

    run_counts: List[RunDedupCount] = []
    if args.runs is not None:
        runs_out = out_dir / "runs"
        runs_out.mkdir(parents=True, exist_ok=True)
        for path, run in load_run_files(args.runs, strict_scores=args.strict_scores):
            deduped_run = dedup_run(run, clusters)
            (runs_out / path.name).write_text(write_run(deduped_run), encoding="utf-8")
            run_counts.append(
                RunDedupCount(
                    run=run.tag, entries_before=run.n_entries, entries_after=deduped_run.n_entries
                )
            )

    before, after = qrels_stats(qrels), qrels_stats(deduped)
    report = DedupReport(
        command="dedup",
        diagnostics=diagnostics_for("dedup", start_time),
        before=before,
        after=after,
        runs=run_counts,
        out_dir=str(out_dir),
    )
    frame = pd.DataFrame(
        [
            {**{f"label {g}": n for g, n in sorted(h.counts.items())}, "topics": h.topics, "total": h.total}
            for h in (before, after)
        ],
        index=["before", "after"],
    )
    text = _table(frame)
    if run_counts:
        text += "\n\n" + _table(pd.DataFrame([c.model_dump() for c in run_counts]), index=False)
    _emit(args, report, text)
    return EXIT_OK


def cmd_convert_clusters(args: argparse.Namespace, start_time: float) -> int:
    clusters = clusters_from_pairs(_read(args.pairs), source=str(args.pairs))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(write_clusters(clusters), encoding="utf-8")
    passages = sum(len(cluster.members) for cluster in clusters.clusters)
    report = ClustersReport(
        command="convert-clusters",
        diagnostics=diagnostics_for("convert-clusters", start_time),
        clusters=len(clusters),
        passages=passages,
        out=str(out),
    )
    _emit(args, report, f"clusters: {len(clusters)}\npassages: {passages}\nwritten: {out}")
    return EXIT_OK


def cmd_agreement(args: argparse.Namespace, start_time: float) -> int:
    qrels_a = _load_qrels(args.qrels_a, args)
    qrels_b = _load_qrels(args.qrels_b, args)
    aligned = align(qrels_a, qrels_b)
    matrix = confusion(aligned)
    kappa = cohen_kappa(aligned)
    kappa_binary = cohen_kappa(aligned, "binary") if args.binary else None
    binary_matrix = confusion(aligned, "binary") if args.binary else None

    if args.csv:
        matrix.to_frame().to_csv(args.csv)

    report = AgreementReport(
        command="agreement",
        diagnostics=diagnostics_for("agreement", start_time),
        coverage=Coverage(aligned=len(aligned), only_in_a=aligned.human_only, only_in_b=aligned.llm_only),
        kappa=kappa,
        kappa_binary=kappa_binary,
        labels=list(matrix.labels),
        confusion=matrix.to_lists(),
        per_label_accuracy=matrix.per_label_accuracy(),
        binary_confusion=binary_matrix.to_lists() if binary_matrix is not None else None,
    )
    lines = [
        f"aligned pairs: {len(aligned)} (only in A: {aligned.human_only}, only in B: {aligned.llm_only})",
        f"kappa (4-scale): {kappa:.4f}",
    ]
    if kappa_binary is not None:
        lines.append(f"kappa (binary): {kappa_binary:.4f}")
    lines += ["", "confusion (rows: A, columns: B)", _table(matrix.to_frame())]
    accuracy = ", ".join(
        f"{label}: {'n/a' if value is None else f'{value:.3f}'}"
        for label, value in matrix.per_label_accuracy().items()
    )
    lines.append(f"per-label accuracy: {accuracy}")
    if binary_matrix is not None:
        lines += ["", "binary confusion", _table(binary_matrix.to_frame())]
    _emit(args, report, "\n".join(lines))
    return EXIT_OK


def cmd_correlate(args: argparse.Namespace, start_time: float) -> int:
    qrels_a = _load_qrels(args.qrels_a, args)
    qrels_b = _load_qrels(args.qrels_b, args)
    runs = load_runs_dir(args.runs, strict_scores=args.strict_scores, skip_malformed=True)
    if len(runs) < 2:
        raise DataError(f"need at least 2 parseable runs, found {len(runs)}", source=str(args.runs))

    correlation = correlate_systems(runs, qrels_a, qrels_b, args.k, gain=args.gain)
    if args.scatter:
        Path(args.scatter).parent.mkdir(parents=True, exist_ok=True)
        correlation.to_frame().to_csv(args.scatter, index=False)

    report = CorrelateReport(
        command="correlate",
        diagnostics=diagnostics_for("correlate", start_time),
        runs_dir=str(args.runs),
        correlation=correlation,
        scatter_csv=str(args.scatter) if args.scatter else None,
    )
    text = "\n".join(
        [
            f"runs: {len(correlation.entries)}  k: {correlation.k}",
            f"kendall tau-b: {correlation.kendall_tau:.4f}",
            f"spearman rho: {correlation.spearman_rho:.4f}",
            "",
            _table(correlation.to_frame(), index=False),
        ]
    )
    _emit(args, report, text)
    return EXIT_OK


def cmd_serve_mock(args: argparse.Namespace, start_time: float) -> int:
    import uvicorn

    from src.reljudge.api.mock_endpoint import FaultPlan, create_mock_app

    api_key = None
    if args.api_key_env:
        api_key = os.getenv(args.api_key_env)
        if not api_key:
            raise UsageError(f"{args.api_key_env} environment variable is required")
    app = create_mock_app(
        seed=args.mock_seed,
        noise_rate=args.mock_noise_rate,
        faults=FaultPlan(fail_first=args.fail_first, status_code=args.fault_status),
        response_delay=args.delay,
        api_key=api_key,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level=args.log_level.lower())
    return EXIT_OK


# =============================================================================
# Parser
# =============================================================================


def _add_llm_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("LLM settings (default: RELJUDGE_* env vars, then built-in defaults)")
    group.add_argument("--backend", choices=["remote", "mock"], help="remote endpoint or offline mock (default remote)")
    group.add_argument("--model", help="model name (default gpt-4o)")
    group.add_argument("--endpoint", help="OpenAI-compatible base URL (default https://api.openai.com/v1)")
    group.add_argument("--api-key-env", help="environment variable holding the API key (default OPENAI_API_KEY)")
    group.add_argument("--temperature", type=float, help="default 0")
    group.add_argument("--top-p", type=float, help="default 1")
    group.add_argument("--frequency-penalty", type=float, help="default 0.5")
    group.add_argument("--presence-penalty", type=float, help="default 0")
    group.add_argument("--max-output-tokens", type=_positive_int, help="default 100")
    group.add_argument("--timeout", type=float, help="per-request timeout in seconds (default 60)")
    group.add_argument("--max-retries", type=int, help="retries after the first attempt (default 5)")
    group.add_argument("--max-in-flight", type=_positive_int, help="concurrent requests (default 8)")
    group.add_argument("--cache-dir", type=Path, help="persistent reply cache directory (default off)")
    group.add_argument("--mock-seed", type=int, help="mock backend seed (default 0)")
    group.add_argument("--mock-noise-rate", type=float, help="mock backend grade noise in [0,1] (default 0)")


def build_parser() -> CommandParser:
    parser = CommandParser(
        prog="reljudge",
        description="LLM relevance assessment and evaluation toolkit for TREC-style collections.",
        epilog="Exit codes: 0 ok, 1 usage error, 2 data error, 3 LLM/remote error. "
        "File formats are described in docs/FORMATS.md.",
    )
    parser.add_argument("--version", action="version", version=f"reljudge {__version__}")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="stderr log threshold (default INFO)",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="print a JSON report instead of text")

    qrels_input = argparse.ArgumentParser(add_help=False)
    qrels_input.add_argument(
        "--dedup-policy",
        choices=["error", "last"],
        default="error",
        help="repeated (topic, passage) in a qrels file: error, or keep the last grade (default error)",
    )
    runs_input = argparse.ArgumentParser(add_help=False)
    runs_input.add_argument(
        "--strict-scores", action="store_true", help="reject runs whose scores increase with rank"
    )

    commands = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    judge = commands.add_parser(
        "judge", parents=[common, qrels_input, runs_input], help="grade (topic, passage) pairs with an LLM"
    )
    judge.add_argument("--topics", type=Path, required=True, help="topics TSV: topic_id<TAB>query")
    judge.add_argument("--corpus", type=Path, required=True, help="passage corpus JSONL")
    judge.add_argument("--corpus-indexed", action="store_true", help="read passages from disk via an offset index")
    judge.add_argument("--id-field", default="id", help="corpus id field (default id)")
    judge.add_argument("--text-field", default="text", help="corpus text field (default text)")
    pool = judge.add_mutually_exclusive_group(required=True)
    pool.add_argument("--pool-qrels", type=Path, help="judge the pairs of an existing qrels file")
    pool.add_argument("--pool-runs", type=Path, help="judge the top-K union of every run in a directory")
    judge.add_argument("--depth", type=_positive_int, help="K for --pool-runs")
    judge.add_argument("--out", type=Path, required=True, help="predicted qrels output path")
    judge.add_argument("--audit-log", type=Path, help="JSON-lines audit log (default: judgments.jsonl next to --out)")
    judge.add_argument("--retry-failed", action="store_true", help="judge pairs whose logged record is an error again")
    judge.add_argument("--template", type=Path, help="alternative prompt template with {query} and {passage}")
    _add_llm_flags(judge)
    judge.set_defaults(handler=cmd_judge)

    stats = commands.add_parser(
        "stats", parents=[common, qrels_input], help="label histogram and topic count of a qrels file"
    )
    stats.add_argument("qrels", type=Path)
    stats.set_defaults(handler=cmd_stats)

    dedup = commands.add_parser(
        "dedup",
        parents=[common, qrels_input, runs_input],
        help="drop non-canonical near-duplicates from qrels and runs",
    )
    dedup.add_argument("--qrels", type=Path, required=True)
    dedup.add_argument("--clusters", type=Path, required=True, help="duplicate clusters file")
    dedup.add_argument(
        "--clusters-format",
        choices=["tsv", "pairs"],
        default="tsv",
        help="tsv: canonical<TAB>member,member; pairs: 'member canonical' lines (default tsv)",
    )
    dedup.add_argument("--runs", type=Path, help="directory of runs to deduplicate as well")
    dedup.add_argument("--out-dir", type=Path, required=True)
    dedup.set_defaults(handler=cmd_dedup)

    convert = commands.add_parser(
        "convert-clusters", parents=[common], help="convert 'member canonical' pairs to the cluster TSV"
    )
    convert.add_argument("--pairs", type=Path, required=True)
    convert.add_argument("--out", type=Path, required=True)
    convert.set_defaults(handler=cmd_convert_clusters)

    agreement = commands.add_parser(
        "agreement", parents=[common, qrels_input], help="Cohen's kappa and confusion matrix between two qrels"
    )
    agreement.add_argument("qrels_a", type=Path, help="reference qrels (rows), e.g. human")
    agreement.add_argument("qrels_b", type=Path, help="compared qrels (columns), e.g. LLM")
    agreement.add_argument("--binary", action="store_true", help="also report kappa with {0,1}->0, {2,3}->1")
    agreement.add_argument("--csv", type=Path, help="write the 4x4 confusion matrix as CSV")
    agreement.set_defaults(handler=cmd_agreement)

    correlate = commands.add_parser(
        "correlate",
        parents=[common, qrels_input, runs_input],
        help="Kendall tau-b and Spearman rho between two leaderboards",
    )
    correlate.add_argument("qrels_a", type=Path)
    correlate.add_argument("qrels_b", type=Path)
    correlate.add_argument("--runs", type=Path, required=True, help="directory of run files")
    correlate.add_argument("--k", type=_positive_int, default=10, help="nDCG cutoff (default 10)")
    correlate.add_argument("--gain", choices=["linear", "exponential"], default="linear")
    correlate.add_argument("--scatter", type=Path, help="write run,score_a,score_b CSV")
    correlate.set_defaults(handler=cmd_correlate)

    serve = commands.add_parser("serve-mock", help="run the OpenAI-compatible mock endpoint")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--mock-seed", type=int, default=0)
    serve.add_argument("--mock-noise-rate", type=float, default=0.0)
    serve.add_argument("--fail-first", type=int, default=0, help="answer the first N requests with --fault-status")
    serve.add_argument("--fault-status", type=int, default=429)
    serve.add_argument("--delay", type=float, default=0.0, help="seconds before each reply")
    serve.add_argument("--api-key-env", help="require the key in this environment variable")
    serve.set_defaults(handler=cmd_serve_mock)

    return parser


# =============================================================================
# Entry point
# =============================================================================

ERROR_CODES: Dict[int, str] = {
    EXIT_USAGE: "USAGE_ERROR",
    EXIT_DATA: "DATA_ERROR",
    EXIT_LLM: "LLM_ERROR",
    EXIT_INTERNAL: "INTERNAL_ERROR",
}


def _exit_code_for(error: BaseException) -> int:
    if isinstance(error, UsageError):
        return EXIT_USAGE
    if isinstance(error, (DataError, ResponseParseError, OSError, UnicodeDecodeError)):
        return EXIT_DATA
    if isinstance(error, LLMError):
        return EXIT_LLM
    return EXIT_INTERNAL


def run_command(args: argparse.Namespace) -> int:
    """Run a parsed command, mapping exceptions onto exit codes."""
    handler: Callable[[argparse.Namespace, float], int] = args.handler
    start_time = time.monotonic()
    try:
        return handler(args, start_time)
    except (RelJudgeError, OSError, UnicodeDecodeError) as e:
        code = _exit_code_for(e)
        message = str(e)
        logger.warning("Command failed", command=args.command, error=message, error_type=type(e).__name__)
    except Exception as e:
        code = EXIT_INTERNAL
        message = f"{type(e).__name__}: {e}"
        logger.error("Unexpected failure", command=args.command, error=message, exc_info=True)

    print(f"reljudge {args.command}: error: {message}", file=sys.stderr)
    if getattr(args, "json", False):
        print(error_report(args.command, ERROR_CODES[code], message, start_time).model_dump_json(indent=2))
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    configure_logging(args.log_level)
    load_dotenv()
    return run_command(args)
