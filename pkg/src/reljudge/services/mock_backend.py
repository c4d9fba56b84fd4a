"""
Deterministic offline stand-in for the grading LLM.
Grades by query-term overlap with the passage; no network, no randomness by default.
"""

import hashlib
import random
import re

from src.reljudge.core.errors import DataError
from src.reljudge.core.prompt import PromptText
from src.reljudge.core.trec_io import Grade
from src.reljudge.services.llm_config import CompletionResult

_QUERY = re.compile(r"^Query: ?(.*)$", re.MULTILINE)
_PASSAGE = re.compile(r"^Passage: ?(.*?)(?=\n\n|\Z)", re.MULTILINE | re.DOTALL)
_NON_WORD = re.compile(r"[^\w\s]+")


def terms(text: str) -> set:
    """Lowercased, punctuation-stripped whitespace tokens."""
    return set(_NON_WORD.sub("", text.lower()).split())


def extract_query_passage(prompt: PromptText):
    query_match = _QUERY.search(prompt.text)
    passage_match = _PASSAGE.search(prompt.text)
    if query_match is None or passage_match is None:
        raise DataError("cannot extract query and passage from prompt")
    return query_match.group(1), passage_match.group(1)


def overlap_grade(query: str, passage: str) -> Grade:
    """
    3 if every query term occurs in the passage, 2 if at least two thirds do,
    1 if any does, else 0.
    """
    query_terms = terms(query)
    if not query_terms:
        return Grade.IRRELEVANT
    matched = len(query_terms & terms(passage))
    total = len(query_terms)
    if matched == total:
        return Grade.PERFECTLY_RELEVANT
    if 3 * matched >= 2 * total:
        return Grade.HIGHLY_RELEVANT
    if matched >= 1:
        return Grade.RELATED
    return Grade.IRRELEVANT


def mock_complete(prompt: PromptText, seed: int = 0, *, noise_rate: float = 0.0) -> CompletionResult:
    """
    Reply "##final score: g" for the prompt's query/passage pair.

    With noise_rate > 0 the grade is replaced by a different one with that
    probability; the draw is seeded by (seed, prompt), so the reply is still
    a pure function of its arguments.
    """
    query, passage = extract_query_passage(prompt)
    grade = overlap_grade(query, passage)

    if noise_rate > 0.0:
        digest = hashlib.sha256(f"{seed}\x00{prompt.text}".encode("utf-8")).digest()
        rng = random.Random(int.from_bytes(digest[:8], "big"))
        if rng.random() < noise_rate:
            grade = rng.choice([g for g in Grade if g != grade])

    text = f"##final score: {int(grade)}"
    return CompletionResult(
        text=text,
        prompt_tokens=len(prompt.text.split()),
        completion_tokens=len(text.split()),
        latency=0.0,
        from_cache=False,
        attempt_count=1,
    )
