"""
LLM client configuration and completion result models.
Defaults reproduce the published assessment setup; env vars use the RELJUDGE_ prefix.
"""

import hashlib
from pathlib import Path
from typing import Any, Dict, Literal, Optional

import orjson
from pydantic import BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class LLMConfig(BaseSettings):
    """
    Sampling and transport settings for relevance grading.

    Sampling defaults: temperature 0, top_p 1, frequency penalty 0.5,
    presence penalty 0, no stop sequences. max_output_tokens is not part of
    the published setup; 100 fits the one-line reply and caps cost.
    """

    model_config = SettingsConfigDict(env_prefix="RELJUDGE_", frozen=True, extra="ignore")

    endpoint_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o"
    api_key_source: str = "OPENAI_API_KEY"

    temperature: float = Field(0.0, ge=0.0)
    top_p: float = Field(1.0, gt=0.0, le=1.0)
    frequency_penalty: float = Field(0.5, ge=-2.0, le=2.0)
    presence_penalty: float = Field(0.0, ge=-2.0, le=2.0)
    max_output_tokens: PositiveInt = 100

    request_timeout: float = Field(60.0, gt=0.0, description="seconds")
    max_retries: NonNegativeInt = 5
    max_in_flight: PositiveInt = 8
    backoff_base_seconds: float = Field(1.0, ge=0.0)
    backoff_cap_seconds: float = Field(60.0, ge=0.0)

    cache_dir: Optional[Path] = None
    backend: Literal["remote", "mock"] = "remote"
    mock_seed: int = 0
    mock_noise_rate: float = Field(0.0, ge=0.0, le=1.0)

    def sampling_params(self) -> Dict[str, Any]:
        return {
            "temperature": self.temperature,
            "top_p": self.top_p,
            "frequency_penalty": self.frequency_penalty,
            "presence_penalty": self.presence_penalty,
            "max_output_tokens": self.max_output_tokens,
        }

    def backend_identity(self) -> Dict[str, Any]:
        """What besides model and sampling decides the reply text."""
        if self.backend == "mock":
            return {"backend": "mock", "seed": self.mock_seed, "noise_rate": self.mock_noise_rate}
        return {"backend": "remote"}

    def params_hash(self) -> str:
        """SHA-256 of the sampling parameters and backend identity."""
        payload = orjson.dumps({**self.sampling_params(), **self.backend_identity()}, option=orjson.OPT_SORT_KEYS)
        return hashlib.sha256(payload).hexdigest()


class CompletionResult(BaseModel):
    """One completion with usage and provenance."""

    model_config = ConfigDict(frozen=True)

    text: str
    prompt_tokens: NonNegativeInt = 0
    completion_tokens: NonNegativeInt = 0
    latency: float = Field(0.0, ge=0.0, description="seconds")
    from_cache: bool = False
    attempt_count: NonNegativeInt = 1

    @model_validator(mode="after")
    def _attempts_unless_cached(self) -> "CompletionResult":
        if not self.from_cache and self.attempt_count < 1:
            raise ValueError("attempt_count must be >= 1 for a non-cached completion")
        return self
