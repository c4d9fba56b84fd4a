#!/usr/bin/env python3
"""
Smoke test for an OpenAI-compatible grading endpoint.
Sends the fixture query-passage pairs through LLMClient and compares the
returned grades with the mock qrels.

Usage:
    python -m src.reljudge.cli serve-mock --port 8000 &
    RELJUDGE_ENDPOINT_URL=http://127.0.0.1:8000/v1 OPENAI_API_KEY=x python scripts/smoke_endpoint.py
"""

import asyncio
import sys
import time
from pathlib import Path

from dotenv import load_dotenv

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.reljudge.core.corpus import load_corpus  # noqa: E402
from src.reljudge.core.errors import LLMError, ResponseParseError  # noqa: E402
from src.reljudge.core.prompt import parse_judgment, render_prompt  # noqa: E402
from src.reljudge.core.trec_io import parse_qrels, parse_topics  # noqa: E402
from src.reljudge.services.llm_client import LLMClient  # noqa: E402
from src.reljudge.services.llm_config import LLMConfig  # noqa: E402

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


async def main() -> int:
    load_dotenv()
    config = LLMConfig()
    topics = parse_topics((FIXTURES / "topics.tsv").read_text(encoding="utf-8"))
    corpus = load_corpus(FIXTURES / "corpus.jsonl")
    expected = parse_qrels((FIXTURES / "qrels_mock_expected.txt").read_text(encoding="utf-8"))

    print(f"🚀 Grading {expected.n_entries} pairs with {config.model_name} at {config.endpoint_url}")
    print("=" * 60)

    matches = 0
    failures = 0
    start_time = time.time()
    async with LLMClient(config) as client:
        for topic_id, passage_id, want in expected.sorted_entries():
            prompt = render_prompt(topics[topic_id], corpus.get_text(passage_id))
            try:
                result = await client.complete(prompt)
                grade = parse_judgment(result.text).grade
            except (LLMError, ResponseParseError) as e:
                failures += 1
                print(f"❌ {topic_id} {passage_id}: {type(e).__name__}: {e}")
                continue
            marker = "✅" if grade == want else "➖"
            matches += grade == want
            print(
                f"{marker} {topic_id} {passage_id}: grade {int(grade)} (mock {int(want)}), "
                f"{result.latency * 1000:.0f}ms, attempts {result.attempt_count}"
            )

    duration = time.time() - start_time
    print("=" * 60)
    print(f"📊 {matches}/{expected.n_entries} match the mock grades, {failures} failed, {duration:.2f}s")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(asyncio.run(main()))
