"""
Passage corpus access for JSON-lines corpora.
In-memory for small corpora; offset-indexed on disk for DL-scale ones.
"""

import os
import threading
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Dict, Iterable, Iterator, Optional, Tuple, Union

import orjson
import structlog

from src.reljudge.core.errors import DataError, DuplicateEntryError, ParseError, PassageNotFoundError
from src.reljudge.core.trec_io import check_id, numbered_lines, read_text_file

logger = structlog.get_logger()

INDEX_VERSION = 1


class PassageCorpus(ABC):
    """Read-only mapping of passage id -> passage text."""

    @abstractmethod
    def get_text(self, passage_id: str) -> str:
        """Return the passage text, raising PassageNotFoundError for unknown ids."""

    @abstractmethod
    def __contains__(self, passage_id: object) -> bool: ...

    @abstractmethod
    def __len__(self) -> int: ...

    @abstractmethod
    def ids(self) -> Iterator[str]: ...

    def __getitem__(self, passage_id: str) -> str:
        return self.get_text(passage_id)

    def close(self) -> None:
        pass

    def __enter__(self) -> "PassageCorpus":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


class InMemoryCorpus(PassageCorpus):
    def __init__(self, passages: Dict[str, str]):
        self._passages = dict(passages)

    def get_text(self, passage_id: str) -> str:
        try:
            return self._passages[passage_id]
        except KeyError:
            raise PassageNotFoundError(f"passage {passage_id!r} not in corpus") from None

    def __contains__(self, passage_id: object) -> bool:
        return passage_id in self._passages

    def __len__(self) -> int:
        return len(self._passages)

    def ids(self) -> Iterator[str]:
        return iter(self._passages)


class IndexedCorpus(PassageCorpus):
    """
    Corpus read lazily from disk through a byte-offset index.

    Lookups seek into the JSONL file under a lock, so one instance can be
    shared by concurrent tasks.
    """

    def __init__(self, path: Path, offsets: Dict[str, int], *, id_field: str, text_field: str):
        self.path = path
        self._offsets = offsets
        self._id_field = id_field
        self._text_field = text_field
        self._lock = threading.Lock()
        self._handle = None

    def get_text(self, passage_id: str) -> str:
        offset = self._offsets.get(passage_id)
        if offset is None:
            raise PassageNotFoundError(f"passage {passage_id!r} not in corpus", source=str(self.path))
        with self._lock:
            if self._handle is None:
                self._handle = self.path.open("rb")
            self._handle.seek(offset)
            raw = self._handle.readline()
        _, text = _decode_record(raw, self._id_field, self._text_field, str(self.path), None)
        return text

    def __contains__(self, passage_id: object) -> bool:
        return passage_id in self._offsets

    def __len__(self) -> int:
        return len(self._offsets)

    def ids(self) -> Iterator[str]:
        return iter(self._offsets)

    def close(self) -> None:
        with self._lock:
            if self._handle is not None:
                self._handle.close()
                self._handle = None


def _decode_record(
    raw: Union[str, bytes],
    id_field: str,
    text_field: str,
    source: Optional[str],
    line_number: Optional[int],
) -> Tuple[str, str]:
    try:
        record = orjson.loads(raw)
    except orjson.JSONDecodeError as e:
        raise ParseError(f"malformed JSON record: {e}", source=source, line_number=line_number) from e
    if not isinstance(record, dict):
        raise ParseError("record is not a JSON object", source=source, line_number=line_number)
    for name in (id_field, text_field):
        if name not in record:
            raise ParseError(f"missing field {name!r}", source=source, line_number=line_number)
        if not isinstance(record[name], str):
            raise ParseError(f"field {name!r} is not a string", source=source, line_number=line_number)
    try:
        passage_id = check_id(record[id_field], "passage id")
    except DataError as e:
        raise ParseError(e.message, source=source, line_number=line_number) from e
    return passage_id, record[text_field]


def _read_in_memory(
    lines: Iterable[str], id_field: str, text_field: str, source: Optional[str]
) -> InMemoryCorpus:
    passages: Dict[str, str] = {}
    for line_number, line in numbered_lines(lines):
        if not line.strip():
            continue
        passage_id, text = _decode_record(line, id_field, text_field, source, line_number)
        if passage_id in passages:
            raise DuplicateEntryError(
                f"duplicate passage id {passage_id!r}", source=source, line_number=line_number
            )
        passages[passage_id] = text
    return InMemoryCorpus(passages)


def _build_offsets(path: Path, id_field: str, text_field: str) -> Dict[str, int]:
    offsets: Dict[str, int] = {}
    offset = 0
    with path.open("rb") as handle:
        for line_number, raw in enumerate(handle, start=1):
            if raw.strip():
                passage_id, _ = _decode_record(raw, id_field, text_field, str(path), line_number)
                if passage_id in offsets:
                    raise DuplicateEntryError(
                        f"duplicate passage id {passage_id!r}", source=str(path), line_number=line_number
                    )
                offsets[passage_id] = offset
            offset += len(raw)
    return offsets


def _open_indexed(
    path: Path, id_field: str, text_field: str, index_path: Optional[Path]
) -> IndexedCorpus:
    index_path = index_path or path.with_name(path.name + ".offsets.json")
    stat = path.stat()
    fingerprint = {
        "version": INDEX_VERSION,
        "source_size": stat.st_size,
        "source_mtime_ns": stat.st_mtime_ns,
        "id_field": id_field,
        "text_field": text_field,
    }

    if index_path.exists():
        try:
            stored = orjson.loads(index_path.read_bytes())
            if all(stored.get(key) == value for key, value in fingerprint.items()):
                logger.info("Corpus offset index reused", index=str(index_path), passages=len(stored["offsets"]))
                return IndexedCorpus(path, stored["offsets"], id_field=id_field, text_field=text_field)
            logger.info("Corpus offset index stale, rebuilding", index=str(index_path))
        except (orjson.JSONDecodeError, KeyError, TypeError) as e:
            logger.warning("Corpus offset index unreadable, rebuilding", index=str(index_path), error=str(e))

    offsets = _build_offsets(path, id_field, text_field)
    tmp_path = index_path.with_name(index_path.name + ".tmp")
    tmp_path.write_bytes(orjson.dumps({**fingerprint, "offsets": offsets}))
    os.replace(tmp_path, index_path)
    logger.info("Corpus offset index built", index=str(index_path), passages=len(offsets))
    return IndexedCorpus(path, offsets, id_field=id_field, text_field=text_field)


def load_corpus(
    source: Union[str, Path, Iterable[str]],
    *,
    indexed: bool = False,
    id_field: str = "id",
    text_field: str = "text",
    index_path: Optional[Path] = None,
) -> PassageCorpus:
    """
    Load a JSON-lines passage corpus.

    Args:
        source: A file path, the file content as a string, or an iterable of lines
        indexed: Keep passages on disk behind an offset index (requires a path)
        id_field: Record field holding the passage id
        text_field: Record field holding the passage text
        index_path: Where to keep the offset index (default: next to the corpus)

    Returns:
        PassageCorpus
    """
    if isinstance(source, Path):
        if indexed:
            return _open_indexed(source, id_field, text_field, index_path)
        # split on \n only: JSON strings may hold other line separators such as U+2028
        lines = read_text_file(source).split("\n")
        corpus = _read_in_memory(lines, id_field, text_field, str(source))
    else:
        if indexed:
            raise DataError("indexed corpus access needs a file path")
        corpus = _read_in_memory(source, id_field, text_field, None)

    logger.info("Corpus loaded", passages=len(corpus), indexed=False)
    return corpus
