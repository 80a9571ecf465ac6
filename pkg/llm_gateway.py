"""
LLM gateway: one async contract over chat-completion backends, with
temperature-0 decoding, tenacity retries, bounded parallelism and a
content-addressed response cache. Also the response parsers.
"""

import asyncio
import logging
import os
import re
import time
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Optional, Protocol, Union

import requests
from tenacity import AsyncRetrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from cache import ContentCache, content_digest
from corpus import Label
from errors import BackendUnavailable, GatewayError, GatewayTimeout, RateLimited
from prompting import RenderedPrompt, Vocabulary

logger = logging.getLogger(__name__)

RETRYABLE = (BackendUnavailable, RateLimited, GatewayTimeout)


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 256
    model_id: str = "gpt-4o"

    def __post_init__(self):
        if self.temperature < 0:
            raise GatewayError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_tokens < 1:
            raise GatewayError(f"max_tokens must be positive, got {self.max_tokens}")


@dataclass(frozen=True)
class CompletionResult:
    raw_text: str
    from_cache: bool
    backend_id: str
    latency_ms: int


class Stage(str, Enum):
    ZERO_SHOT = "ZeroShot"
    FEW_SHOT = "FewShot"
    REASONING = "Reasoning"
    MACHINE_RULE = "MachineRule"
    REFLECTION = "Reflection"
    BASELINE = "Baseline"


@dataclass(frozen=True)
class Verdict:
    decision: Label
    source_stage: Stage
    raw_evidence: str = ""

    def to_dict(self):
        return {"decision": self.decision.value, "source_stage": self.source_stage.value,
                "raw_evidence": self.raw_evidence}


@dataclass(frozen=True)
class ParseFailure:
    raw_text: str
    vocabulary: Vocabulary


class ChatBackend(Protocol):
    backend_id: str

    async def generate(self, prompt: RenderedPrompt, params: DecodingParams) -> str:
        ...


def _retry_after(headers) -> Optional[float]:
    value = (headers or {}).get("retry-after")
    try:
        return float(value) if value is not None else None
    except (TypeError, ValueError):
        return None


class OpenAIChatBackend:
    """Chat Completions over any OpenAI-compatible base URL."""

    def __init__(self, base_url: Optional[str] = None, api_key_env: str = "OPENAI_API_KEY",
                 timeout: float = 60.0):
        api_key = os.getenv(api_key_env, "").strip()
        if not api_key:
            raise BackendUnavailable(f"{api_key_env} not set in environment.")
        from openai import AsyncOpenAI

        # retries are owned by the gateway
        self.client = AsyncOpenAI(api_key=api_key, base_url=base_url or None, timeout=timeout, max_retries=0)
        self.backend_id = f"openai:{base_url or 'api.openai.com'}"

    async def generate(self, prompt: RenderedPrompt, params: DecodingParams) -> str:
        import openai

        try:
            resp = await self.client.chat.completions.create(
                model=params.model_id,
                temperature=params.temperature,
                max_tokens=params.max_tokens,
                messages=[{"role": "user", "content": prompt.text}],
            )
        except openai.RateLimitError as e:
            raise RateLimited(str(e), retry_after=_retry_after(e.response.headers)) from e
        except openai.APITimeoutError as e:
            raise GatewayTimeout(str(e)) from e
        except openai.APIConnectionError as e:
            raise BackendUnavailable(str(e)) from e
        except openai.APIStatusError as e:
            if e.status_code >= 500:
                raise BackendUnavailable(str(e), status=e.status_code) from e
            raise GatewayError(str(e), status=e.status_code) from e
        return resp.choices[0].message.content or ""


class AnthropicChatBackend:
    """Anthropic messages API over plain HTTP."""

    def __init__(self, base_url: Optional[str] = None, api_key_env: str = "ANTHROPIC_API_KEY",
                 timeout: float = 60.0, api_version: str = "2023-06-01"):
        self.api_key = os.getenv(api_key_env, "").strip()
        if not self.api_key:
            raise BackendUnavailable(f"{api_key_env} not set in environment.")
        self.url = (base_url or "https://api.anthropic.com").rstrip("/") + "/v1/messages"
        self.timeout = timeout
        self.api_version = api_version
        self.backend_id = f"anthropic:{self.url}"

    def _post(self, prompt: RenderedPrompt, params: DecodingParams) -> str:
        headers = {
            "x-api-key": self.api_key,
            "anthropic-version": self.api_version,
            "content-type": "application/json",
        }
        payload = {
            "model": params.model_id,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "messages": [{"role": "user", "content": prompt.text}],
        }
        try:
            resp = requests.post(self.url, headers=headers, json=payload, timeout=self.timeout)
        except requests.Timeout as e:
            raise GatewayTimeout(str(e)) from e
        except requests.ConnectionError as e:
            raise BackendUnavailable(str(e)) from e
        if resp.status_code == 429:
            raise RateLimited(f"rate limited by {self.url}", retry_after=_retry_after(resp.headers))
        if resp.status_code >= 500:
            raise BackendUnavailable(f"{self.url} returned {resp.status_code}", status=resp.status_code)
        if resp.status_code >= 400:
            raise GatewayError(f"{self.url} returned {resp.status_code}: {resp.text[:200]}",
                               status=resp.status_code)
        data = resp.json()
        return "".join(block.get("text", "") for block in data.get("content", []) if block.get("type") == "text")

    async def generate(self, prompt: RenderedPrompt, params: DecodingParams) -> str:
        return await asyncio.to_thread(self._post, prompt, params)


class LLMGateway:
    """Cache-first completion with bounded retries and at most `parallelism` calls in flight."""

    def __init__(self, backend: ChatBackend, params: Optional[DecodingParams] = None,
                 cache: Optional[ContentCache] = None, max_attempts: int = 3,
                 retry_backoff: float = 0.5, parallelism: int = 4):
        if parallelism < 1:
            raise GatewayError(f"parallelism must be >= 1, got {parallelism}")
        if max_attempts < 1:
            raise GatewayError(f"max_attempts must be >= 1, got {max_attempts}")
        self.backend = backend
        self.params = params or DecodingParams()
        self.cache = cache
        self.max_attempts = max_attempts
        self.retry_backoff = retry_backoff
        self.parallelism = parallelism
        self.completions = 0
        self.calls_issued = 0
        self.cache_hits = 0
        self._semaphore: Optional[asyncio.Semaphore] = None
        self._semaphore_loop = None

    @property
    def backend_id(self) -> str:
        return self.backend.backend_id

    def cache_key(self, prompt: RenderedPrompt) -> str:
        return content_digest("complete", self.backend.backend_id, self.params.model_id,
                              asdict(self.params), prompt.text)

    def _limit(self) -> asyncio.Semaphore:
        loop = asyncio.get_running_loop()
        if self._semaphore is None or self._semaphore_loop is not loop:
            self._semaphore = asyncio.Semaphore(self.parallelism)
            self._semaphore_loop = loop
        return self._semaphore

    async def _generate_with_retries(self, prompt: RenderedPrompt) -> str:
        retrying = AsyncRetrying(
            reraise=True,
            stop=stop_after_attempt(self.max_attempts),
            wait=wait_exponential(multiplier=self.retry_backoff, min=self.retry_backoff, max=8),
            retry=retry_if_exception_type(RETRYABLE),
        )
        async for attempt in retrying:
            with attempt:
                self.calls_issued += 1
                if attempt.retry_state.attempt_number > 1:
                    logger.warning(f"Retrying {prompt.kind.value} completion "
                                   f"(attempt {attempt.retry_state.attempt_number}/{self.max_attempts})")
                return await self.backend.generate(prompt, self.params)

    async def complete(self, prompt: RenderedPrompt) -> CompletionResult:
        if not prompt.text.strip():
            raise GatewayError("refusing to send an empty prompt", kind=prompt.kind.value)
        self.completions += 1
        key = self.cache_key(prompt)
        if self.cache is not None:
            stored = self.cache.get(key)
            if stored is not None:
                self.cache_hits += 1
                logger.debug(f"Cache hit {key[:12]}... for {prompt.kind.value}")
                return CompletionResult(stored["raw_text"], True, self.backend.backend_id, 0)

        async with self._limit():
            start = time.perf_counter()
            raw = await self._generate_with_retries(prompt)
            latency_ms = int(round((time.perf_counter() - start) * 1000))

        if raw is None:
            raw = ""
        if raw == "":
            logger.warning(f"{self.backend.backend_id} returned empty content for a {prompt.kind.value} prompt")
        if self.cache is not None:
            self.cache.put(key, {"backend_id": self.backend.backend_id,
                                 "model_id": self.params.model_id, "raw_text": raw})
        return CompletionResult(raw, False, self.backend.backend_id, latency_ms)


_VOCAB_PATTERNS = {
    Vocabulary.YES_NO: (re.compile(r"\b(yes|no)\b", re.IGNORECASE), {"yes": Label.VALID, "no": Label.INVALID}),
    Vocabulary.VALID_INVALID: (re.compile(r"\b(valid|invalid)\b", re.IGNORECASE),
                               {"valid": Label.VALID, "invalid": Label.INVALID}),
}


def parse_binary(raw_text: str, vocabulary: Vocabulary, stage: Stage = Stage.REASONING) -> Union[Verdict, ParseFailure]:
    """First standalone vocabulary token wins; anything else is a ParseFailure."""
    if vocabulary not in _VOCAB_PATTERNS or not isinstance(raw_text, str):
        return ParseFailure(raw_text=str(raw_text), vocabulary=vocabulary)
    pattern, mapping = _VOCAB_PATTERNS[vocabulary]
    match = pattern.search(raw_text)
    if match is None:
        return ParseFailure(raw_text=raw_text, vocabulary=vocabulary)
    return Verdict(decision=mapping[match.group(1).lower()], source_stage=stage, raw_evidence=raw_text)


def parse_final_answer(raw_text: str, vocabulary: Vocabulary, stage: Stage) -> Union[Verdict, ParseFailure]:
    """For step-by-step answers: try the last non-empty line, then the whole text."""
    lines = [line for line in (raw_text or "").splitlines() if line.strip()]
    if lines:
        last = parse_binary(lines[-1], vocabulary, stage)
        if isinstance(last, Verdict):
            return Verdict(last.decision, stage, raw_text)
    return parse_binary(raw_text, vocabulary, stage)


_FENCE_RE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_INLINE_FENCE_RE = re.compile(r"```(.*?)```", re.DOTALL)


def extract_code_block(raw_text: str) -> str:
    match = _FENCE_RE.search(raw_text) or _INLINE_FENCE_RE.search(raw_text)
    if match is None:
        return raw_text.strip()
    return match.group(1).strip("\r\n")
