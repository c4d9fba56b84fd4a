"""
TREC file formats: qrels, runs and topics.
Parses into validated, immutable in-memory structures and writes them back.
"""

import re
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from types import MappingProxyType
from typing import (
    Dict,
    Iterable,
    Iterator,
    List,
    Literal,
    Mapping,
    NamedTuple,
    Optional,
    Tuple,
    Union,
)

import structlog
from pydantic import BaseModel, ConfigDict, computed_field

from src.reljudge.core.errors import (
    DataError,
    DuplicateEntryError,
    GradeOutOfRangeError,
    ParseError,
)

logger = structlog.get_logger()

TextSource = Union[str, Iterable[str]]
DuplicatePolicy = Literal["error", "last"]

# ASCII-only numeric tokens; int()/float() alone would also accept "1_0" and non-ASCII digits.
_INT_TOKEN = re.compile(r"[+-]?[0-9]+")
_FLOAT_TOKEN = re.compile(r"[+-]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)(?:[eE][+-]?[0-9]+)?")


class Grade(IntEnum):
    """Graded relevance label on the 0-3 scale."""

    IRRELEVANT = 0
    RELATED = 1
    HIGHLY_RELEVANT = 2
    PERFECTLY_RELEVANT = 3

    @classmethod
    def _missing_(cls, value):
        raise GradeOutOfRangeError(f"grade {value!r} is outside 0-3")

    @classmethod
    def parse(
        cls,
        token: str,
        *,
        source: Optional[str] = None,
        line_number: Optional[int] = None,
    ) -> "Grade":
        """Parse a grade token from a text file, reporting the location on failure."""
        if not _INT_TOKEN.fullmatch(token):
            raise ParseError(
                f"grade {token!r} is not an integer", source=source, line_number=line_number
            )
        value = int(token)
        if value not in _GRADE_VALUES:
            raise GradeOutOfRangeError(
                f"grade {value} is outside 0-3", source=source, line_number=line_number
            )
        return cls(value)


_GRADE_VALUES = frozenset(int(g) for g in Grade)


def check_id(value: str, kind: str) -> str:
    """Ids are opaque strings: non-empty and free of whitespace."""
    if not isinstance(value, str) or not value or any(ch.isspace() for ch in value):
        raise DataError(f"invalid {kind} {value!r}: ids must be non-empty and whitespace-free")
    return value


def read_text_file(path: Union[str, Path]) -> str:
    """Read a UTF-8 input file; undecodable bytes raise ParseError naming the line."""
    path = Path(path)
    data = path.read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError as e:
        line_number = data.count(b"\n", 0, e.start) + 1
        raise ParseError(
            f"invalid UTF-8 byte 0x{data[e.start]:02x}", source=str(path), line_number=line_number
        ) from e


def numbered_lines(text: TextSource) -> Iterator[Tuple[int, str]]:
    """Yield (1-based line number, line without line terminator)."""
    lines = text.splitlines() if isinstance(text, str) else text
    for line_number, line in enumerate(lines, start=1):
        yield line_number, line.rstrip("\r\n")


# =============================================================================
# Qrels
# =============================================================================


class Qrels(Mapping[str, Mapping[str, Grade]]):
    """
    Relevance judgments: topic id -> passage id -> Grade.

    Immutable after construction. Topics without any judged passage are not
    stored, so len(qrels) is the number of judged topics.
    """

    __slots__ = ("_topics", "_n_entries")

    def __init__(self, entries: Optional[Mapping[str, Mapping[str, int]]] = None):
        topics: Dict[str, Mapping[str, Grade]] = {}
        n_entries = 0
        for topic_id, row in (entries or {}).items():
            check_id(topic_id, "topic id")
            checked = {check_id(pid, "passage id"): Grade(grade) for pid, grade in row.items()}
            if checked:
                topics[topic_id] = MappingProxyType(checked)
                n_entries += len(checked)
        self._topics = topics
        self._n_entries = n_entries

    @classmethod
    def from_entries(
        cls,
        entries: Iterable[Tuple[str, str, int]],
        *,
        on_duplicate: DuplicatePolicy = "error",
    ) -> "Qrels":
        rows: Dict[str, Dict[str, int]] = {}
        for topic_id, passage_id, grade in entries:
            row = rows.setdefault(topic_id, {})
            if passage_id in row and on_duplicate == "error":
                raise DuplicateEntryError(f"duplicate judgment for ({topic_id}, {passage_id})")
            row[passage_id] = grade
        return cls(rows)

    def __getitem__(self, topic_id: str) -> Mapping[str, Grade]:
        return self._topics[topic_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._topics)

    def __len__(self) -> int:
        return len(self._topics)

    @property
    def n_entries(self) -> int:
        """Number of (topic, passage) judgments."""
        return self._n_entries

    def iter_entries(self) -> Iterator[Tuple[str, str, Grade]]:
        for topic_id, row in self._topics.items():
            for passage_id, grade in row.items():
                yield topic_id, passage_id, grade

    def sorted_entries(self) -> List[Tuple[str, str, Grade]]:
        return sorted(self.iter_entries(), key=lambda entry: (entry[0], entry[1]))

    def get_grade(self, topic_id: str, passage_id: str) -> Optional[Grade]:
        row = self._topics.get(topic_id)
        return None if row is None else row.get(passage_id)

    def __repr__(self) -> str:
        return f"Qrels(topics={len(self)}, entries={self.n_entries})"


def parse_qrels(
    text: TextSource,
    *,
    on_duplicate: DuplicatePolicy = "error",
    source: Optional[str] = None,
) -> Qrels:
    """
    Parse a TREC qrels file.

    Each non-blank line holds at least four whitespace-separated fields:
    topic id, iteration (ignored), passage id, grade.

    Args:
        text: File content or an iterable of lines
        on_duplicate: "error" rejects a repeated (topic, passage); "last" keeps the last grade
        source: Name used in error messages

    Returns:
        Qrels with every line represented
    """
    rows: Dict[str, Dict[str, Grade]] = {}
    for line_number, line in numbered_lines(text):
        fields = line.split()
        if not fields:
            continue
        if len(fields) < 4:
            raise ParseError(
                f"expected at least 4 fields, got {len(fields)}",
                source=source,
                line_number=line_number,
            )
        topic_id, _iteration, passage_id, grade_token = fields[:4]
        grade = Grade.parse(grade_token, source=source, line_number=line_number)
        row = rows.setdefault(topic_id, {})
        if passage_id in row and on_duplicate == "error":
            raise DuplicateEntryError(
                f"duplicate judgment for ({topic_id}, {passage_id})",
                source=source,
                line_number=line_number,
            )
        row[passage_id] = grade
    return Qrels(rows)


def write_qrels(qrels: Qrels) -> str:
    """Serialize qrels as "topic Q0 passage grade" lines sorted by (topic, passage)."""
    return "".join(
        f"{topic_id} Q0 {passage_id} {int(grade)}\n"
        for topic_id, passage_id, grade in qrels.sorted_entries()
    )


class LabelHistogram(BaseModel):
    """Per-grade judgment counts of one qrels set."""

    model_config = ConfigDict(frozen=True)

    counts: Dict[int, int]
    topics: int

    @computed_field
    @property
    def total(self) -> int:
        return sum(self.counts.values())


def qrels_stats(qrels: Qrels) -> LabelHistogram:
    counts = {int(g): 0 for g in Grade}
    for _topic_id, _passage_id, grade in qrels.iter_entries():
        counts[int(grade)] += 1
    return LabelHistogram(counts=counts, topics=len(qrels))


# =============================================================================
# Runs
# =============================================================================


class RankedPassage(NamedTuple):
    passage_id: str
    rank: int
    score: float


@dataclass(frozen=True)
class RunList:
    """One system's ranked results per topic."""

    tag: str
    rankings: Mapping[str, Tuple[RankedPassage, ...]] = field(default_factory=dict)

    def __post_init__(self):
        check_id(self.tag, "run tag")
        frozen: Dict[str, Tuple[RankedPassage, ...]] = {}
        for topic_id, entries in self.rankings.items():
            check_id(topic_id, "topic id")
            entries = tuple(RankedPassage(*entry) for entry in entries)
            seen = set()
            previous_rank = 0
            for entry in entries:
                check_id(entry.passage_id, "passage id")
                if entry.rank <= previous_rank:
                    raise DataError(
                        f"run {self.tag}, topic {topic_id}: ranks must be positive and strictly increasing"
                    )
                if entry.passage_id in seen:
                    raise DuplicateEntryError(
                        f"run {self.tag}, topic {topic_id}: passage {entry.passage_id} retrieved twice"
                    )
                seen.add(entry.passage_id)
                previous_rank = entry.rank
            frozen[topic_id] = entries
        object.__setattr__(self, "rankings", MappingProxyType(frozen))

    @property
    def n_entries(self) -> int:
        return sum(len(entries) for entries in self.rankings.values())

    def passage_ids(self, topic_id: str) -> List[str]:
        return [entry.passage_id for entry in self.rankings.get(topic_id, ())]


def _parse_rank(token: str, source: Optional[str], line_number: int) -> int:
    if not _INT_TOKEN.fullmatch(token) or int(token) < 1:
        raise ParseError(
            f"rank {token!r} is not a positive integer", source=source, line_number=line_number
        )
    return int(token)


def _parse_score(token: str, source: Optional[str], line_number: int) -> float:
    if not _FLOAT_TOKEN.fullmatch(token):
        raise ParseError(f"score {token!r} is not numeric", source=source, line_number=line_number)
    return float(token)


def parse_run(
    text: TextSource,
    *,
    strict_scores: bool = False,
    source: Optional[str] = None,
) -> RunList:
    """
    Parse a 6-column TREC run: topic Q0 passage rank score tag.

    Lines may appear in any order; each topic's list is re-sorted by rank.
    Scores that increase with rank only produce a warning unless strict_scores is set.
    """
    tag: Optional[str] = None
    per_topic: Dict[str, Dict[str, RankedPassage]] = {}
    for line_number, line in numbered_lines(text):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 6:
            raise ParseError(
                f"expected 6 fields, got {len(fields)}", source=source, line_number=line_number
            )
        topic_id, _q0, passage_id, rank_token, score_token, line_tag = fields
        if tag is None:
            tag = line_tag
        elif line_tag != tag:
            raise ParseError(
                f"mixed run tags {tag!r} and {line_tag!r}", source=source, line_number=line_number
            )
        entries = per_topic.setdefault(topic_id, {})
        if passage_id in entries:
            raise DuplicateEntryError(
                f"passage {passage_id} retrieved twice for topic {topic_id}",
                source=source,
                line_number=line_number,
            )
        entries[passage_id] = RankedPassage(
            passage_id,
            _parse_rank(rank_token, source, line_number),
            _parse_score(score_token, source, line_number),
        )

    if tag is None:
        raise ParseError("run contains no entries", source=source)

    rankings: Dict[str, Tuple[RankedPassage, ...]] = {}
    unordered_topics = []
    for topic_id, entries in per_topic.items():
        ordered = tuple(sorted(entries.values(), key=lambda entry: entry.rank))
        for previous, current in zip(ordered, ordered[1:]):
            if current.rank == previous.rank:
                raise ParseError(
                    f"rank {current.rank} used twice for topic {topic_id}", source=source
                )
        if any(current.score > previous.score for previous, current in zip(ordered, ordered[1:])):
            unordered_topics.append(topic_id)
        rankings[topic_id] = ordered

    if unordered_topics:
        if strict_scores:
            raise ParseError(
                f"scores increase with rank for topic {unordered_topics[0]}", source=source
            )
        logger.warning(
            "Run scores not monotone in rank",
            run=tag,
            source=source,
            topics=len(unordered_topics),
            example_topic=unordered_topics[0],
        )
    return RunList(tag=tag, rankings=rankings)


def write_run(run: RunList) -> str:
    """Serialize a run as 6-column lines sorted by (topic, rank)."""
    lines = []
    for topic_id in sorted(run.rankings):
        for entry in run.rankings[topic_id]:
            lines.append(f"{topic_id} Q0 {entry.passage_id} {entry.rank} {entry.score!r} {run.tag}\n")
    return "".join(lines)


def load_run_files(
    directory: Union[str, Path],
    *,
    strict_scores: bool = False,
    skip_malformed: bool = False,
) -> List[Tuple[Path, RunList]]:
    """
    Load every run file in a directory, keeping each run's path.

    Args:
        directory: Directory holding one run per file (hidden files are ignored)
        strict_scores: Reject runs whose scores increase with rank
        skip_malformed: Log and skip files that fail to parse instead of raising

    Returns:
        (path, run) pairs in file-name order
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"runs directory {directory} does not exist")

    loaded: List[Tuple[Path, RunList]] = []
    tags: Dict[str, str] = {}
    for path in sorted(directory.iterdir()):
        if path.name.startswith(".") or not path.is_file():
            continue
        try:
            run = parse_run(
                read_text_file(path), strict_scores=strict_scores, source=str(path)
            )
        except DataError as e:
            if not skip_malformed:
                raise
            logger.warning("Skipping unparseable run file", path=str(path), error=str(e))
            continue
        if run.tag in tags:
            raise DataError(f"run tag {run.tag!r} used by both {tags[run.tag]} and {path.name}")
        tags[run.tag] = path.name
        loaded.append((path, run))

    logger.info("Runs loaded", directory=str(directory), runs=len(loaded))
    return loaded


def load_runs_dir(
    directory: Union[str, Path],
    *,
    strict_scores: bool = False,
    skip_malformed: bool = False,
) -> List[RunList]:
    """Runs of load_run_files without their paths."""
    return [
        run
        for _path, run in load_run_files(
            directory, strict_scores=strict_scores, skip_malformed=skip_malformed
        )
    ]


# =============================================================================
# Topics
# =============================================================================


class Topics(Mapping[str, str]):
    """Topic id -> query text."""

    __slots__ = ("_queries",)

    def __init__(self, queries: Optional[Mapping[str, str]] = None):
        checked = {}
        for topic_id, query in (queries or {}).items():
            check_id(topic_id, "topic id")
            if not query or not query.strip():
                raise DataError(f"topic {topic_id} has an empty query")
            checked[topic_id] = query
        self._queries = checked

    def __getitem__(self, topic_id: str) -> str:
        return self._queries[topic_id]

    def __iter__(self) -> Iterator[str]:
        return iter(self._queries)

    def __len__(self) -> int:
        return len(self._queries)


def parse_topics(text: TextSource, *, source: Optional[str] = None) -> Topics:
    """Parse "topic_id<TAB>query text" lines."""
    queries: Dict[str, str] = {}
    first_seen: Dict[str, int] = {}
    for line_number, line in numbered_lines(text):
        if not line.strip():
            continue
        if "\t" not in line:
            raise ParseError("missing tab separator", source=source, line_number=line_number)
        topic_id, query = line.split("\t", 1)
        topic_id = topic_id.strip()
        query = query.strip()
        if not query:
            raise ParseError("empty query", source=source, line_number=line_number)
        try:
            check_id(topic_id, "topic id")
        except DataError as e:
            raise ParseError(e.message, source=source, line_number=line_number) from e
        if topic_id in first_seen:
            raise DuplicateEntryError(
                f"topic {topic_id} already defined on line {first_seen[topic_id]}",
                source=source,
                line_number=line_number,
            )
        first_seen[topic_id] = line_number
        queries[topic_id] = query
    return Topics(queries)
