"""
Chat-completion client for relevance grading.
Uses the OpenAI SDK against any compatible endpoint, with bounded concurrency,
jittered exponential backoff and an optional on-disk reply cache.
"""

import asyncio
import os
import time
from typing import Dict, Optional, Tuple

import httpx
import openai
import structlog
from openai import AsyncOpenAI
from tenacity import (
    AsyncRetrying,
    RetryCallState,
    retry_if_exception_type,
    stop_after_attempt,
    wait_random_exponential,
)

from src.reljudge.core.errors import (
    AuthenticationFailure,
    MalformedReplyError,
    MissingAPIKeyError,
    RemoteRequestError,
    RetriesExhaustedError,
)
from src.reljudge.core.prompt import PromptText, prompt_hash
from src.reljudge.services.llm_config import CompletionResult, LLMConfig
from src.reljudge.services.mock_backend import mock_complete
from src.reljudge.services.response_cache import ResponseCache

logger = structlog.get_logger()

# Throttling, server-side failures and transport failures are retried; other 4xx are not.
RETRYABLE_ERRORS = (
    openai.RateLimitError,
    openai.InternalServerError,
    openai.APITimeoutError,
    openai.APIConnectionError,
)


def _status_of(error: BaseException) -> Optional[int]:
    return getattr(error, "status_code", None)


class LLMClient:
    """Sends one rendered prompt as a single user message and returns the reply."""

    def __init__(self, config: Optional[LLMConfig] = None, *, http_client: Optional[httpx.AsyncClient] = None):
        self.config = config or LLMConfig()
        self._semaphore = asyncio.Semaphore(self.config.max_in_flight)
        self._cache = ResponseCache(self.config.cache_dir) if self.config.cache_dir else None
        self._client: Optional[AsyncOpenAI] = None

        if self.config.backend == "remote":
            api_key = os.getenv(self.config.api_key_source)
            if not api_key:
                raise MissingAPIKeyError(f"{self.config.api_key_source} environment variable is required")
            # SDK retries are disabled; retry policy lives in _remote_complete
            self._client = AsyncOpenAI(
                api_key=api_key,
                base_url=self.config.endpoint_url,
                timeout=self.config.request_timeout,
                max_retries=0,
                http_client=http_client,
            )

        logger.info(
            "LLM client initialized",
            backend=self.config.backend,
            endpoint=self.config.endpoint_url,
            model=self.config.model_name,
            max_in_flight=self.config.max_in_flight,
            max_retries=self.config.max_retries,
            cache_dir=str(self.config.cache_dir) if self.config.cache_dir else None,
            **self.config.sampling_params(),
        )

    async def complete(self, prompt: PromptText) -> CompletionResult:
        """
        Complete a prompt.

        Cache hits bypass the in-flight limit and report from_cache=True with
        attempt_count 0. Every other call holds a concurrency slot while its
        request is outstanding.

        Raises:
            AuthenticationFailure: credentials rejected by the endpoint
            RemoteRequestError: non-retryable HTTP error
            RetriesExhaustedError: retry budget spent on throttling/5xx/timeouts
            MalformedReplyError: reply had no usable message content
        """
        start_time = time.monotonic()
        cache_key = None
        if self._cache is not None:
            cache_key = ResponseCache.key_for(self.config.model_name, prompt.text, self._cache_params())
            entry = await self._cache.get(cache_key)
            if entry is not None:
                logger.debug("Cache hit", prompt_hash=prompt_hash(prompt)[:12])
                return CompletionResult(
                    text=entry.reply,
                    prompt_tokens=entry.prompt_tokens,
                    completion_tokens=entry.completion_tokens,
                    latency=time.monotonic() - start_time,
                    from_cache=True,
                    attempt_count=0,
                )

        if self.config.backend == "mock":
            async with self._semaphore:
                result = mock_complete(
                    prompt, self.config.mock_seed, noise_rate=self.config.mock_noise_rate
                )
        else:
            result = await self._remote_complete(prompt, start_time)

        if self._cache is not None:
            await self._cache.put(
                cache_key,
                model=self.config.model_name,
                params=self._cache_params(),
                prompt=prompt.text,
                reply=result.text,
                prompt_tokens=result.prompt_tokens,
                completion_tokens=result.completion_tokens,
            )
        return result

    def _cache_params(self) -> Dict[str, object]:
        return {**self.config.sampling_params(), **self.config.backend_identity()}

    def _log_retry(self, retry_state: RetryCallState) -> None:
        error = retry_state.outcome.exception() if retry_state.outcome else None
        logger.warning(
            "LLM request failed, backing off",
            attempt=retry_state.attempt_number,
            status=_status_of(error),
            error_type=type(error).__name__,
            sleep_seconds=round(retry_state.next_action.sleep, 3) if retry_state.next_action else None,
        )

    async def _remote_complete(self, prompt: PromptText, start_time: float) -> CompletionResult:
        cfg = self.config
        attempts = 0
        try:
            async for attempt in AsyncRetrying(
                stop=stop_after_attempt(cfg.max_retries + 1),
                wait=wait_random_exponential(multiplier=cfg.backoff_base_seconds, max=cfg.backoff_cap_seconds),
                retry=retry_if_exception_type(RETRYABLE_ERRORS),
                before_sleep=self._log_retry,
                reraise=True,
            ):
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    # the slot is released while backing off
                    async with self._semaphore:
                        response = await self._client.chat.completions.create(
                            model=cfg.model_name,
                            messages=[{"role": "user", "content": prompt.text}],
                            temperature=cfg.temperature,
                            top_p=cfg.top_p,
                            frequency_penalty=cfg.frequency_penalty,
                            presence_penalty=cfg.presence_penalty,
                            max_tokens=cfg.max_output_tokens,
                            stream=False,
                        )
        except RETRYABLE_ERRORS as e:
            logger.error("LLM retries exhausted", attempts=attempts, status=_status_of(e), error=str(e))
            raise RetriesExhaustedError(
                f"request failed after {attempts} attempts: {e}",
                last_status=_status_of(e),
                attempt_count=attempts,
            ) from e
        except (openai.AuthenticationError, openai.PermissionDeniedError) as e:
            raise AuthenticationFailure(f"endpoint rejected credentials ({e.status_code})") from e
        except openai.APIStatusError as e:
            raise RemoteRequestError(f"endpoint returned HTTP {e.status_code}: {e}", status=e.status_code) from e
        except openai.APIResponseValidationError as e:
            raise MalformedReplyError(f"reply failed validation: {e}") from e

        choices = getattr(response, "choices", None)
        message = choices[0].message if choices else None
        content = getattr(message, "content", None)
        if not isinstance(content, str):
            raise MalformedReplyError("reply has no message content")

        usage = getattr(response, "usage", None)
        latency = time.monotonic() - start_time
        logger.debug(
            "LLM completion finished",
            prompt_hash=prompt_hash(prompt)[:12],
            attempts=attempts,
            response_length=len(content),
            duration_ms=int(latency * 1000),
        )
        return CompletionResult(
            text=content,
            prompt_tokens=usage.prompt_tokens if usage else 0,
            completion_tokens=usage.completion_tokens if usage else 0,
            latency=latency,
            from_cache=False,
            attempt_count=attempts,
        )

    async def aclose(self) -> None:
        if self._client is not None:
            await self._client.close()

    async def __aenter__(self) -> "LLMClient":
        return self

    async def __aexit__(self, *exc_info) -> None:
        await self.aclose()


# Client instances per configuration, each tied to the event loop it was created in
_clients: Dict[LLMConfig, Tuple[Optional[asyncio.AbstractEventLoop], LLMClient]] = {}


def _running_loop() -> Optional[asyncio.AbstractEventLoop]:
    try:
        return asyncio.get_running_loop()
    except RuntimeError:
        return None


def get_llm_client(config: Optional[LLMConfig] = None) -> LLMClient:
    """Get the shared client for a configuration in the current event loop."""
    config = config or LLMConfig()
    loop = _running_loop()
    cached = _clients.get(config)
    if cached is None or cached[0] is not loop:
        _clients[config] = (loop, LLMClient(config))
    return _clients[config][1]


async def complete(prompt: PromptText, config: Optional[LLMConfig] = None) -> CompletionResult:
    """Convenience function for a single completion."""
    return await get_llm_client(config).complete(prompt)
