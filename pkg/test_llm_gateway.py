#!/usr/bin/env python3
"""
Tests for the LLM gateway (cache, retries, parallelism), the response parsers
and the offline backends
"""

import asyncio

import pytest

from cache import ContentCache
from corpus import Label
from errors import BackendUnavailable, GatewayError, RateLimited
from llm_gateway import (
    AnthropicChatBackend,
    DecodingParams,
    LLMGateway,
    OpenAIChatBackend,
    ParseFailure,
    Stage,
    Verdict,
    extract_code_block,
    parse_binary,
    parse_final_answer,
)
from mock_backends import INTERPRETATION_RESPONSE, RuleFollowingBackend, ScriptedBackend
from prompting import (
    RenderedPrompt,
    PromptKind,
    Vocabulary,
    render_apu,
    render_few_shot,
    render_interpretation,
    render_reflection,
    render_zero_shot,
)
from rules import default_ruleset


class FlakyBackend:
    backend_id = "flaky"

    def __init__(self, failures, error=RateLimited, answer="YES"):
        self.failures = failures
        self.error = error
        self.answer = answer
        self.calls = 0

    async def generate(self, prompt, params):
        self.calls += 1
        if self.calls <= self.failures:
            raise self.error("try again")
        return self.answer


class SlowBackend:
    backend_id = "slow"

    def __init__(self):
        self.in_flight = 0
        self.peak = 0

    async def generate(self, prompt, params):
        self.in_flight += 1
        self.peak = max(self.peak, self.in_flight)
        await asyncio.sleep(0.01)
        self.in_flight -= 1
        return "NO"


def prompt(text="Is this valid?"):
    return RenderedPrompt(PromptKind.REASONING, text, Vocabulary.YES_NO)


def test_cache_hit_on_second_call(tmp_path):
    backend = FlakyBackend(0)
    gateway = LLMGateway(backend, cache=ContentCache(tmp_path))
    first = asyncio.run(gateway.complete(prompt()))
    second = asyncio.run(gateway.complete(prompt()))
    assert (first.raw_text, first.from_cache) == ("YES", False)
    assert (second.raw_text, second.from_cache) == ("YES", True)
    assert backend.calls == 1
    assert (gateway.completions, gateway.calls_issued, gateway.cache_hits) == (2, 1, 1)


def test_cache_key_depends_on_params(tmp_path):
    backend = FlakyBackend(0)
    a = LLMGateway(backend, DecodingParams(max_tokens=10))
    b = LLMGateway(backend, DecodingParams(max_tokens=20))
    assert a.cache_key(prompt()) != b.cache_key(prompt())
    assert a.cache_key(prompt()) == LLMGateway(backend, DecodingParams(max_tokens=10)).cache_key(prompt())


def test_retries_until_success():
    backend = FlakyBackend(2)
    gateway = LLMGateway(backend, max_attempts=3, retry_backoff=0.0)
    result = asyncio.run(gateway.complete(prompt()))
    assert result.raw_text == "YES"
    assert backend.calls == 3
    assert gateway.calls_issued == 3


def test_retries_exhausted():
    gateway = LLMGateway(FlakyBackend(5, BackendUnavailable), max_attempts=2, retry_backoff=0.0)
    with pytest.raises(BackendUnavailable):
        asyncio.run(gateway.complete(prompt()))
    assert gateway.calls_issued == 2


def test_non_retryable_error_is_raised_at_once():
    backend = FlakyBackend(5, GatewayError)
    gateway = LLMGateway(backend, max_attempts=3, retry_backoff=0.0)
    with pytest.raises(GatewayError):
        asyncio.run(gateway.complete(prompt()))
    assert backend.calls == 1


def test_empty_prompt_rejected():
    with pytest.raises(GatewayError):
        asyncio.run(LLMGateway(FlakyBackend(0)).complete(prompt("   ")))


def test_parallelism_bound():
    backend = SlowBackend()
    gateway = LLMGateway(backend, parallelism=2)

    async def run_all():
        return await asyncio.gather(*(gateway.complete(prompt(f"question {i}")) for i in range(10)))

    results = asyncio.run(run_all())
    assert len(results) == 10
    assert backend.peak == 2


def test_decoding_params_validation():
    with pytest.raises(GatewayError):
        DecodingParams(temperature=-0.1)
    with pytest.raises(GatewayError):
        LLMGateway(FlakyBackend(0), parallelism=0)


@pytest.mark.parametrize("raw, expected", [
    ("YES", Label.VALID),
    ("no.", Label.INVALID),
    ("  Yes, the comment asks for it", Label.VALID),
    ("I think YES but maybe NO", Label.VALID),
    ("**NO**", Label.INVALID),
])
def test_parse_binary_yes_no(raw, expected):
    verdict = parse_binary(raw, Vocabulary.YES_NO, Stage.REFLECTION)
    assert isinstance(verdict, Verdict)
    assert verdict.decision is expected
    assert verdict.source_stage is Stage.REFLECTION
    assert verdict.raw_evidence == raw


def test_parse_binary_valid_invalid():
    assert parse_binary("Invalid", Vocabulary.VALID_INVALID).decision is Label.INVALID
    assert parse_binary("valid: justified", Vocabulary.VALID_INVALID).decision is Label.VALID


@pytest.mark.parametrize("raw, vocabulary", [
    ("maybe", Vocabulary.YES_NO),
    ("noted, yesterday", Vocabulary.YES_NO),
    ("", Vocabulary.YES_NO),
    ("invalidated", Vocabulary.VALID_INVALID),
    ("YES", Vocabulary.CODE_ONLY),
])
def test_parse_binary_failures(raw, vocabulary):
    result = parse_binary(raw, vocabulary)
    assert isinstance(result, ParseFailure)
    assert result.raw_text == raw


def test_parse_final_answer_prefers_last_line():
    verdict = parse_final_answer("No rule is violated.\nYES", Vocabulary.YES_NO, Stage.FEW_SHOT)
    assert verdict.decision is Label.VALID
    assert verdict.raw_evidence == "No rule is violated.\nYES"
    fallback = parse_final_answer("YES, because...\n(see above)", Vocabulary.YES_NO, Stage.FEW_SHOT)
    assert fallback.decision is Label.VALID


def test_extract_code_block():
    assert extract_code_block("```python\nx = 1\ny = 2\n```") == "x = 1\ny = 2"
    assert extract_code_block("Here: ```x = 1```") == "x = 1"
    assert extract_code_block("  x = 1 \n") == "x = 1"
    assert extract_code_block("") == ""


def test_rule_following_backend(soup_pairs):
    backend = RuleFollowingBackend()
    gateway = LLMGateway(backend)
    valid, invalid = soup_pairs[0], soup_pairs[2]

    async def ask(p):
        return (await gateway.complete(p)).raw_text

    assert asyncio.run(ask(render_zero_shot(valid))) == "valid"
    assert asyncio.run(ask(render_zero_shot(invalid))) == "invalid"
    assert asyncio.run(ask(render_reflection(invalid, default_ruleset()))) == "NO"
    assert asyncio.run(ask(render_apu(valid.code_before, valid.comment_text, subject=valid))) == valid.code_before
    assert asyncio.run(ask(render_interpretation(soup_pairs, 1, 1))) == INTERPRETATION_RESPONSE
    cot = asyncio.run(ask(render_few_shot(invalid, soup_pairs[:2], cot=True)))
    assert cot == "Rules fired: R1, R3.\nNO"
    assert backend.prompts_seen == 6


def test_scripted_backend_round_trip(tmp_path):
    p = prompt("scripted question")
    ScriptedBackend({p.digest(): "NO"}).save(tmp_path / "script.json")
    backend = ScriptedBackend.from_file(tmp_path / "script.json")
    assert asyncio.run(LLMGateway(backend).complete(p)).raw_text == "NO"
    assert backend.requested == [p.digest()]
    with pytest.raises(GatewayError):
        asyncio.run(LLMGateway(backend).complete(prompt("unscripted")))


def test_scripted_backend_default():
    backend = ScriptedBackend({}, default="YES")
    assert asyncio.run(LLMGateway(backend).complete(prompt())).raw_text == "YES"


def test_http_backends_need_keys(monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    monkeypatch.delenv("ANTHROPIC_API_KEY", raising=False)
    with pytest.raises(BackendUnavailable):
        OpenAIChatBackend()
    with pytest.raises(BackendUnavailable):
        AnthropicChatBackend()


class FakeResponse:
    def __init__(self, status_code, data=None, headers=None):
        self.status_code = status_code
        self._data = data or {}
        self.headers = headers or {}
        self.text = str(self._data)

    def json(self):
        return self._data


def test_anthropic_backend_parses_messages(monkeypatch):
    monkeypatch.setenv("ANTHROPIC_API_KEY", "test-key")
    sent = {}

    def fake_post(url, headers, json, timeout):
        sent.update(url=url, headers=headers, payload=json)
        return FakeResponse(200, {"content": [{"type": "text", "text": "YES"}]})

    monkeypatch.setattr("llm_gateway.requests.post", fake_post)
    backend = AnthropicChatBackend(base_url="http://localhost:9999/")
    text = asyncio.run(backend.generate(prompt(), DecodingParams(model_id="claude-test")))
    assert text == "YES"
    assert sent["url"] == "http://localhost:9999/v1/messages"
    assert sent["headers"]["x-api-key"] == "test-key"
    assert sent["payload"]["temperature"] == 0.0


def test_anthropic_rate_limit_maps_to_retryable(monkeypatch):
    monkeypatch.setenv("ANTHROPIC_API_KEY", "test-key")
    monkeypatch.setattr("llm_gateway.requests.post",
                        lambda url, headers, json, timeout: FakeResponse(429, headers={"retry-after": "2"}))
    backend = AnthropicChatBackend()
    with pytest.raises(RateLimited) as info:
        asyncio.run(backend.generate(prompt(), DecodingParams()))
    assert info.value.retry_after == 2.0
