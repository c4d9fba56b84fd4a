"""
Persistent on-disk cache of LLM replies.
One human-readable JSON file per key under <cache_dir>/<first-2-hex>/<hash>.json.
"""

import asyncio
import hashlib
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import aiofiles
import aiofiles.os
import orjson
import structlog
from pydantic import BaseModel, ValidationError

logger = structlog.get_logger()

LOCK_STRIPES = 64


class CacheEntry(BaseModel):
    key: str
    model: str
    params: Dict[str, Any]
    prompt: str
    reply: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    created_at: str


class ResponseCache:
    """Content-addressed reply cache; writes are atomic and serialized per key."""

    def __init__(self, cache_dir: Path):
        self.cache_dir = Path(cache_dir)
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._locks = [asyncio.Lock() for _ in range(LOCK_STRIPES)]

    @staticmethod
    def key_for(model_name: str, prompt: str, params: Mapping[str, Any]) -> str:
        """SHA-256 over model, full prompt and every parameter that shapes the reply."""
        payload = orjson.dumps(
            {"model": model_name, "prompt": prompt, "params": dict(params)},
            option=orjson.OPT_SORT_KEYS,
        )
        return hashlib.sha256(payload).hexdigest()

    def path_for(self, key: str) -> Path:
        return self.cache_dir / key[:2] / f"{key}.json"

    def lock_for(self, key: str) -> asyncio.Lock:
        """Writes to one key are serialized; distinct keys may share a stripe."""
        return self._locks[int(key[:8], 16) % LOCK_STRIPES]

    async def get(self, key: str) -> Optional[CacheEntry]:
        path = self.path_for(key)
        if not await aiofiles.os.path.exists(path):
            return None
        try:
            async with aiofiles.open(path, "rb") as f:
                data = await f.read()
            entry = CacheEntry.model_validate(orjson.loads(data))
        except (OSError, orjson.JSONDecodeError, ValidationError) as e:
            logger.warning("Unreadable cache entry ignored", path=str(path), error=str(e))
            return None
        if entry.key != key:
            logger.warning("Cache entry key mismatch ignored", path=str(path))
            return None
        return entry

    async def put(
        self,
        key: str,
        *,
        model: str,
        params: Mapping[str, Any],
        prompt: str,
        reply: str,
        prompt_tokens: int,
        completion_tokens: int,
    ) -> None:
        entry = CacheEntry(
            key=key,
            model=model,
            params=dict(params),
            prompt=prompt,
            reply=reply,
            prompt_tokens=prompt_tokens,
            completion_tokens=completion_tokens,
            created_at=datetime.now(timezone.utc).isoformat(),
        )
        path = self.path_for(key)
        async with self.lock_for(key):
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp_path = path.with_name(f"{key}.{uuid.uuid4().hex}.tmp")
            async with aiofiles.open(tmp_path, "wb") as f:
                await f.write(orjson.dumps(entry.model_dump(), option=orjson.OPT_INDENT_2))
            await aiofiles.os.replace(tmp_path, path)
