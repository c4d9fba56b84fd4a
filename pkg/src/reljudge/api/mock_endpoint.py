"""
OpenAI-compatible mock chat-completion endpoint.
Serves the deterministic overlap grader over HTTP, with optional fault
injection and latency, so the remote client path can run offline.
"""

import asyncio
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional

import structlog
from fastapi import FastAPI, Header
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from src.reljudge import __version__
from src.reljudge.core.errors import DataError
from src.reljudge.core.prompt import PromptText
from src.reljudge.services.mock_backend import mock_complete

logger = structlog.get_logger()


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatCompletionRequest(BaseModel):
    """Request body of /v1/chat/completions; unknown fields are accepted."""

    model_config = ConfigDict(extra="allow")

    model: str
    messages: List[ChatMessage] = Field(min_length=1)
    temperature: float = 1.0
    top_p: float = 1.0
    frequency_penalty: float = 0.0
    presence_penalty: float = 0.0
    max_tokens: Optional[int] = None


class FaultPlan(BaseModel):
    """Answer the first fail_first requests with status_code instead of a completion."""

    fail_first: int = Field(0, ge=0)
    status_code: int = Field(429, ge=400, le=599)


@dataclass
class EndpointState:
    """Request counters, readable by tests through app.state.endpoint."""

    requests_total: int = 0
    in_flight: int = 0
    peak_in_flight: int = 0
    received: List[ChatCompletionRequest] = field(default_factory=list)


def _error(status_code: int, message: str, error_type: str) -> JSONResponse:
    return JSONResponse(
        status_code=status_code,
        content={"error": {"message": message, "type": error_type, "code": status_code}},
    )


def create_mock_app(
    *,
    seed: int = 0,
    noise_rate: float = 0.0,
    faults: Optional[FaultPlan] = None,
    response_delay: float = 0.0,
    api_key: Optional[str] = None,
) -> FastAPI:
    """
    Build the mock endpoint application.

    Args:
        seed: Seed for the grader's noise draw
        noise_rate: Probability of replacing the overlap grade
        faults: Leading requests to fail with a fixed status
        response_delay: Seconds to wait before answering each request
        api_key: When set, requests without "Bearer <api_key>" get 401
    """
    faults = faults or FaultPlan()
    state = EndpointState()

    app = FastAPI(
        title="reljudge mock endpoint",
        description="OpenAI-compatible chat completions backed by the overlap grader",
        version=__version__,
    )
    app.state.endpoint = state

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "service": "mock-endpoint",
            "version": __version__,
            "time": datetime.now(timezone.utc).isoformat(),
            "requests_total": state.requests_total,
        }

    @app.post("/v1/chat/completions")
    async def chat_completions(
        request: ChatCompletionRequest,
        authorization: Optional[str] = Header(default=None),
    ):
        state.requests_total += 1
        request_number = state.requests_total
        state.in_flight += 1
        state.peak_in_flight = max(state.peak_in_flight, state.in_flight)
        state.received.append(request)
        try:
            if api_key is not None and authorization != f"Bearer {api_key}":
                logger.warning("Mock endpoint rejected credentials", request_number=request_number)
                return _error(401, "invalid api key", "invalid_request_error")

            if response_delay > 0:
                await asyncio.sleep(response_delay)

            if request_number <= faults.fail_first:
                logger.info("Injected fault", request_number=request_number, status=faults.status_code)
                return _error(faults.status_code, "injected fault", "mock_fault")

            user_messages = [m for m in request.messages if m.role == "user"]
            if not user_messages:
                return _error(400, "no user message", "invalid_request_error")
            try:
                result = mock_complete(PromptText(user_messages[-1].content), seed, noise_rate=noise_rate)
            except DataError as e:
                return _error(400, str(e), "invalid_request_error")

            return _completion_body(request.model, result.text, result.prompt_tokens, result.completion_tokens)
        finally:
            state.in_flight -= 1

    logger.info(
        "Mock endpoint initialized",
        seed=seed,
        noise_rate=noise_rate,
        fail_first=faults.fail_first,
        fault_status=faults.status_code,
        response_delay=response_delay,
    )
    return app


def _completion_body(model: str, text: str, prompt_tokens: int, completion_tokens: int) -> Dict[str, Any]:
    return {
        "id": f"chatcmpl-{uuid.uuid4().hex}",
        "object": "chat.completion",
        "created": int(time.time()),
        "model": model,
        "choices": [
            {
                "index": 0,
                "message": {"role": "assistant", "content": text},
                "finish_reason": "stop",
            }
        ],
        "usage": {
            "prompt_tokens": prompt_tokens,
            "completion_tokens": completion_tokens,
            "total_tokens": prompt_tokens + completion_tokens,
        },
    }
