"""
End-to-end relevance assessment: pool -> prompts -> LLM -> grades.
Produces predicted qrels plus a JSON-lines audit log that makes jobs resumable.
"""

import asyncio
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple

import aiofiles
import httpx
import orjson
import structlog
from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from src.reljudge.core.corpus import PassageCorpus
from src.reljudge.core.errors import (
    AuthenticationFailure,
    DataError,
    DuplicateEntryError,
    LLMError,
    ParseError,
    ResponseParseError,
    UnresolvablePoolError,
)
from src.reljudge.core.prompt import PromptTemplate, PromptText, parse_judgment, prompt_hash, render_prompt
from src.reljudge.core.trec_io import Grade, Qrels, RunList, Topics
from src.reljudge.services.llm_client import LLMClient
from src.reljudge.services.llm_config import LLMConfig

logger = structlog.get_logger()

PoolPair = Tuple[str, str]


# =============================================================================
# Pool
# =============================================================================


@dataclass(frozen=True)
class Pool:
    """Ordered, duplicate-free (topic_id, passage_id) pairs to judge."""

    pairs: Tuple[PoolPair, ...] = ()

    def __post_init__(self):
        pairs = tuple((str(t), str(p)) for t, p in self.pairs)
        seen = set()
        for pair in pairs:
            if pair in seen:
                raise DuplicateEntryError(f"pair ({pair[0]}, {pair[1]}) appears twice in the pool")
            seen.add(pair)
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def __iter__(self) -> Iterator[PoolPair]:
        return iter(self.pairs)


def pool_from_qrels(qrels: Qrels) -> Pool:
    """One pair per judged entry, ordered by (topic, passage); grades are discarded."""
    return Pool(tuple((topic_id, passage_id) for topic_id, passage_id, _ in qrels.sorted_entries()))


def pool_from_runs(runs: Iterable[RunList], depth: int) -> Pool:
    """Union of every run's top-depth passages per topic, ordered by (topic, passage)."""
    if depth < 1:
        raise DataError(f"pool depth must be >= 1, got {depth}")
    pairs = set()
    for run in runs:
        for topic_id, entries in run.rankings.items():
            for entry in entries[:depth]:
                pairs.add((topic_id, entry.passage_id))
    return Pool(tuple(sorted(pairs)))


def check_resolvable(pool: Pool, topics: Topics, corpus: PassageCorpus) -> None:
    """Fail before any LLM call if a pair names an unknown topic or passage, or a blank passage."""
    missing = []
    for topic_id, passage_id in pool:
        if topic_id not in topics:
            missing.append(f"({topic_id}, {passage_id}): unknown topic {topic_id}")
        elif passage_id not in corpus:
            missing.append(f"({topic_id}, {passage_id}): passage {passage_id} not in corpus")
        elif not corpus.get_text(passage_id).strip():
            missing.append(f"({topic_id}, {passage_id}): passage {passage_id} has no text")
    if missing:
        shown = "; ".join(missing[:5])
        more = f" (and {len(missing) - 5} more)" if len(missing) > 5 else ""
        raise UnresolvablePoolError(f"{len(missing)} unresolvable pool pairs: {shown}{more}")


# =============================================================================
# Audit log
# =============================================================================


class JudgmentRecord(BaseModel):
    """One judged pair. Exactly one of grade and error is set."""

    model_config = ConfigDict(frozen=True)

    topic_id: str
    passage_id: str
    prompt_hash: str
    raw_response: str = ""
    grade: Optional[Grade] = None
    error: Optional[str] = None
    error_kind: Optional[Literal["transport", "parse"]] = None
    latency: float = 0.0
    attempt_count: int = 0
    from_cache: bool = False
    model: str = ""
    params_hash: str = ""
    judged_at: str = ""

    @model_validator(mode="after")
    def _grade_xor_error(self) -> "JudgmentRecord":
        if (self.grade is None) == (self.error is None):
            raise ValueError("exactly one of grade and error must be set")
        if self.error is not None and self.error_kind is None:
            raise ValueError("error records need an error_kind")
        return self

    @property
    def pair(self) -> PoolPair:
        return (self.topic_id, self.passage_id)

    @property
    def ok(self) -> bool:
        return self.grade is not None


def load_audit_log(path: Path) -> Dict[PoolPair, JudgmentRecord]:
    """
    Read an audit log; the newest record per pair wins.

    An unparseable final line is a write cut short by a crash and is skipped
    with a warning. Corruption anywhere else is a ParseError.
    """
    path = Path(path)
    if not path.exists():
        return {}
    lines = path.read_bytes().split(b"\n")
    last_index = max((i for i, line in enumerate(lines) if line.strip()), default=-1)
    records: Dict[PoolPair, JudgmentRecord] = {}
    for index, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            record = JudgmentRecord.model_validate(orjson.loads(line))
        except (orjson.JSONDecodeError, ValidationError) as e:
            if index == last_index:
                logger.warning("Skipping truncated audit log line", path=str(path), line_number=index + 1)
                continue
            raise ParseError(f"corrupt audit record: {e}", source=str(path), line_number=index + 1) from e
        records[record.pair] = record
    return records


def _drop_partial_tail(path: Path) -> None:
    """Cut a trailing partial line so appended records start on a fresh line."""
    if not path.exists():
        return
    data = path.read_bytes()
    if not data or data.endswith(b"\n"):
        return
    keep = data.rfind(b"\n") + 1
    with path.open("r+b") as f:
        f.truncate(keep)


class AuditLog:
    """Single writer for the JSON-lines audit log; one flushed line per record."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._lock = asyncio.Lock()
        self._file = None

    async def open(self) -> "AuditLog":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        _drop_partial_tail(self.path)
        self._file = await aiofiles.open(self.path, "ab")
        return self

    async def append(self, record: JudgmentRecord) -> None:
        async with self._lock:
            await self._file.write(orjson.dumps(record.model_dump(mode="json")) + b"\n")
            await self._file.flush()

    async def close(self) -> None:
        if self._file is not None:
            await self._file.close()
            self._file = None

    async def __aenter__(self) -> "AuditLog":
        return await self.open()

    async def __aexit__(self, *exc_info) -> None:
        await self.close()


# =============================================================================
# Pipeline
# =============================================================================


class JudgeSummary(BaseModel):
    pool_size: int
    judged: int
    resumed: int
    failures: int
    transport_failures: int
    parse_failures: int
    cache_hits: int
    model: str
    superseded: int = 0


class JudgeOutcome(NamedTuple):
    qrels: Qrels
    records: List[JudgmentRecord]
    summary: JudgeSummary


class JudgePipeline:
    """
    Judges a pool concurrently through one LLMClient.

    Concurrency is bounded by the client's max_in_flight; workers pull pairs
    from a shared queue and hand finished records to the single log writer.
    """

    def __init__(
        self,
        topics: Topics,
        corpus: PassageCorpus,
        client: LLMClient,
        *,
        template: Optional[PromptTemplate] = None,
        log_path: Optional[Path] = None,
        retry_failed: bool = False,
        progress_every: int = 100,
    ):
        self.topics = topics
        self.corpus = corpus
        self.client = client
        self.template = template
        self.log_path = Path(log_path) if log_path else None
        self.retry_failed = retry_failed
        self.progress_every = max(1, progress_every)

    async def run(self, pool: Pool) -> JudgeOutcome:
        check_resolvable(pool, self.topics, self.corpus)
        # every prompt is rendered before the first request
        prompts = {
            pair: render_prompt(self.topics[pair[0]], self.corpus.get_text(pair[1]), self.template)
            for pair in pool
        }
        config = self.client.config
        params_hash = config.params_hash()

        previous = load_audit_log(self.log_path) if self.log_path else {}
        resumed: Dict[PoolPair, JudgmentRecord] = {}
        superseded = 0
        for pair in pool:
            record = previous.get(pair)
            if record is None or (self.retry_failed and not record.ok):
                continue
            if (
                record.model != config.model_name
                or record.params_hash != params_hash
                or record.prompt_hash != prompt_hash(prompts[pair])
            ):
                superseded += 1
                continue
            resumed[pair] = record
        pending = [pair for pair in pool if pair not in resumed]

        if superseded:
            logger.warning(
                "Audit log records from another model, prompt or parameter set are judged again",
                path=str(self.log_path),
                superseded=superseded,
            )
        logger.info(
            "Judging started",
            pool_size=len(pool),
            resumed=len(resumed),
            pending=len(pending),
            model=config.model_name,
            backend=config.backend,
        )

        fresh = await self._judge_pending(pending, prompts, params_hash) if pending else {}

        records = [fresh.get(pair) or resumed[pair] for pair in pool]
        qrels = Qrels.from_entries(
            (record.topic_id, record.passage_id, record.grade) for record in records if record.ok
        )
        failed = [record for record in records if not record.ok]
        summary = JudgeSummary(
            pool_size=len(pool),
            judged=len(fresh),
            resumed=len(resumed),
            failures=len(failed),
            transport_failures=sum(1 for r in failed if r.error_kind == "transport"),
            parse_failures=sum(1 for r in failed if r.error_kind == "parse"),
            cache_hits=sum(1 for r in fresh.values() if r.from_cache),
            superseded=superseded,
            model=config.model_name,
        )
        logger.info("Judging finished", **summary.model_dump())
        return JudgeOutcome(qrels=qrels, records=records, summary=summary)

    async def _judge_pending(
        self,
        pending: Sequence[PoolPair],
        prompts: Mapping[PoolPair, PromptText],
        params_hash: str,
    ) -> Dict[PoolPair, JudgmentRecord]:
        queue: asyncio.Queue = asyncio.Queue()
        for pair in pending:
            queue.put_nowait(pair)
        results: Dict[PoolPair, JudgmentRecord] = {}
        audit_log = AuditLog(self.log_path) if self.log_path else None

        async def worker() -> None:
            while True:
                try:
                    pair = queue.get_nowait()
                except asyncio.QueueEmpty:
                    return
                record = await self._judge_pair(pair, prompts[pair], params_hash)
                if audit_log is not None:
                    await audit_log.append(record)
                results[pair] = record
                if len(results) % self.progress_every == 0:
                    logger.info("Judging progress", done=len(results), total=len(pending))

        n_workers = min(self.client.config.max_in_flight, len(pending))
        if audit_log is not None:
            await audit_log.open()
        tasks = [asyncio.create_task(worker()) for _ in range(n_workers)]
        try:
            await asyncio.gather(*tasks)
        finally:
            for task in tasks:
                task.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            if audit_log is not None:
                await audit_log.close()
        return results

    async def _judge_pair(self, pair: PoolPair, prompt: PromptText, params_hash: str) -> JudgmentRecord:
        topic_id, passage_id = pair
        base = {
            "topic_id": topic_id,
            "passage_id": passage_id,
            "prompt_hash": prompt_hash(prompt),
            "model": self.client.config.model_name,
            "params_hash": params_hash,
            "judged_at": datetime.now(timezone.utc).isoformat(),
        }
        start_time = time.monotonic()
        try:
            result = await self.client.complete(prompt)
        except AuthenticationFailure:
            raise
        except LLMError as e:
            logger.warning("Pair failed", topic_id=topic_id, passage_id=passage_id, error=str(e))
            return JudgmentRecord(
                **base,
                error=str(e),
                error_kind="transport",
                latency=time.monotonic() - start_time,
                attempt_count=getattr(e, "attempt_count", 1),
            )

        provenance = {
            "raw_response": result.text,
            "latency": result.latency,
            "attempt_count": result.attempt_count,
            "from_cache": result.from_cache,
        }
        try:
            parsed = parse_judgment(result.text)
        except ResponseParseError as e:
            logger.warning("Unparseable reply", topic_id=topic_id, passage_id=passage_id, error=str(e))
            return JudgmentRecord(**base, **provenance, error=str(e), error_kind="parse")
        return JudgmentRecord(**base, **provenance, grade=parsed.grade)


async def judge_pool(
    pool: Pool,
    topics: Topics,
    corpus: PassageCorpus,
    config: Optional[LLMConfig] = None,
    *,
    log_path: Optional[Path] = None,
    retry_failed: bool = False,
    template: Optional[PromptTemplate] = None,
    http_client: Optional[httpx.AsyncClient] = None,
) -> JudgeOutcome:
    """Convenience function judging a pool with a client built from config."""
    check_resolvable(pool, topics, corpus)
    async with LLMClient(config, http_client=http_client) as client:
        pipeline = JudgePipeline(
            topics,
            corpus,
            client,
            template=template,
            log_path=log_path,
            retry_failed=retry_failed,
        )
        return await pipeline.run(pool)
