"""Shared fixtures: the 3-topic, 12-passage collection under tests/fixtures."""

import os
from pathlib import Path

import pytest

from src.reljudge.core.corpus import load_corpus
from src.reljudge.core.trec_io import load_runs_dir, parse_qrels, parse_topics
from src.reljudge.services.llm_config import LLMConfig

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(autouse=True)
def isolated_env(monkeypatch):
    """Keep RELJUDGE_* settings from the developer's shell out of the tests."""
    for name in list(os.environ):
        if name.startswith("RELJUDGE_"):
            monkeypatch.delenv(name)


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def topics():
    path = FIXTURES / "topics.tsv"
    return parse_topics(path.read_text(encoding="utf-8"), source=str(path))


@pytest.fixture
def corpus():
    return load_corpus(FIXTURES / "corpus.jsonl")


@pytest.fixture
def human_qrels():
    path = FIXTURES / "qrels_human.txt"
    return parse_qrels(path.read_text(encoding="utf-8"), source=str(path))


@pytest.fixture
def expected_mock_qrels():
    path = FIXTURES / "qrels_mock_expected.txt"
    return parse_qrels(path.read_text(encoding="utf-8"), source=str(path))


@pytest.fixture
def runs():
    return load_runs_dir(FIXTURES / "runs")


@pytest.fixture
def mock_config() -> LLMConfig:
    return LLMConfig(backend="mock", max_in_flight=4)
