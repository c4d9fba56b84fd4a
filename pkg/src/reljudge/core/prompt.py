"""
Relevance assessment prompt rendering and reply parsing.
The bundled template is the DNA (descriptive, narrative, aspects) grading prompt.
"""

import hashlib
import re
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

import structlog

from src.reljudge.core.errors import (
    DataError,
    ResponseOutOfRangeError,
    TemplateError,
    UnparseableResponseError,
)
from src.reljudge.core.trec_io import Grade, read_text_file

logger = structlog.get_logger()

FINAL_SCORE_MARKER = "##final score:"
PLACEHOLDERS = ("query", "passage")

# Marker is matched case-insensitively; the integer after it must stand alone.
_FINAL_SCORE = re.compile(
    re.escape(FINAL_SCORE_MARKER) + r"\s*(-?[0-9]+)(?![0-9]|\.[0-9])", re.IGNORECASE
)
_QUERY_LINE = re.compile(r"^Query:", re.MULTILINE)
_PASSAGE_LINE = re.compile(r"^Passage:", re.MULTILINE)


@dataclass(frozen=True)
class PromptText:
    """A fully rendered prompt, ready to send as one user message."""

    text: str

    def __post_init__(self):
        if FINAL_SCORE_MARKER not in self.text:
            raise DataError(f"prompt lacks the {FINAL_SCORE_MARKER!r} instruction")
        if not _QUERY_LINE.search(self.text) or not _PASSAGE_LINE.search(self.text):
            raise DataError("prompt lacks a 'Query:' or 'Passage:' line")


@dataclass(frozen=True)
class ParsedJudgment:
    grade: Grade
    raw_match: str
    match_position: int


class PromptTemplate:
    """Template with exactly one {query} and one {passage} field."""

    def __init__(self, template: str, *, name: str = "<string>"):
        self.name = name
        self.template = template
        self._validate()

    def _validate(self) -> None:
        try:
            fields = [
                field_name
                for _literal, field_name, _spec, _conv in string.Formatter().parse(self.template)
                if field_name is not None
            ]
        except ValueError as e:
            raise TemplateError(f"unbalanced braces in template: {e}", source=self.name) from e
        for placeholder in PLACEHOLDERS:
            if fields.count(placeholder) != 1:
                raise TemplateError(
                    f"template must contain {{{placeholder}}} exactly once", source=self.name
                )
        unknown = sorted(set(fields) - set(PLACEHOLDERS))
        if unknown:
            raise TemplateError(f"unknown template fields: {unknown}", source=self.name)
        if FINAL_SCORE_MARKER not in self.template:
            raise TemplateError(f"template lacks {FINAL_SCORE_MARKER!r}", source=self.name)

    @classmethod
    def from_file(cls, path: Path) -> "PromptTemplate":
        return cls(read_text_file(path), name=str(path))

    @classmethod
    def default(cls) -> "PromptTemplate":
        asset = resources.files("src.reljudge.core").joinpath("assets", "dna_prompt.txt")
        return cls(asset.read_bytes().decode("utf-8"), name="dna_prompt.txt")

    def render(self, query: str, passage: str) -> PromptText:
        """
        Substitute query and passage verbatim.

        str.format_map is single-pass, so placeholder-like text inside the
        query or passage is left untouched. No truncation or escaping.
        """
        if not query or not query.strip():
            raise DataError("empty query")
        if not passage or not passage.strip():
            raise DataError("empty passage")
        return PromptText(self.template.format_map({"query": query, "passage": passage}))


_default_template: Optional[PromptTemplate] = None


def get_default_template() -> PromptTemplate:
    """Get the bundled template instance."""
    global _default_template
    if _default_template is None:
        _default_template = PromptTemplate.default()
    return _default_template


def render_prompt(query: str, passage: str, template: Optional[PromptTemplate] = None) -> PromptText:
    """Convenience function rendering with the bundled template unless one is given."""
    return (template or get_default_template()).render(query, passage)


def prompt_hash(prompt: PromptText) -> str:
    return hashlib.sha256(prompt.text.encode("utf-8")).hexdigest()


def parse_judgment(response: str) -> ParsedJudgment:
    """
    Extract the final grade from an LLM reply.

    Uses the last "##final score: <int>" occurrence: models that also print
    their M and T aspect scores put the final (O) score last.

    Args:
        response: Raw reply text

    Returns:
        ParsedJudgment with the grade, the matched fragment and its offset
    """
    last = None
    for last in _FINAL_SCORE.finditer(response):
        pass
    if last is None:
        raise UnparseableResponseError("no final score found in reply", raw_text=response)
    value = int(last.group(1))
    if value not in (0, 1, 2, 3):
        raise ResponseOutOfRangeError(f"final score {value} is outside 0-3", raw_text=response)
    return ParsedJudgment(grade=Grade(value), raw_match=last.group(0), match_position=last.start())
