"""
Offline chat backends for tests and keyless runs.

RuleFollowingBackend answers every classification prompt with the machine-rule
oracle for the prompt's subject pair. ScriptedBackend replays a fixture that
maps prompt digests to responses.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Optional

from corpus import Label
from errors import GatewayError
from llm_gateway import DecodingParams
from prompting import PromptKind, RenderedPrompt, Vocabulary
from rules import ValidationRuleSet, default_ruleset, fired_rules

logger = logging.getLogger(__name__)

INTERPRETATION_RESPONSE = (
    "- YES: The comment names a code term that the edit adds or removes.\n"
    "- NO: The comment only thanks or approves without asking for a change.\n"
)


class RuleFollowingBackend:
    """Deterministic stand-in for a chat model that follows the machine rules exactly."""

    def __init__(self, ruleset: Optional[ValidationRuleSet] = None, backend_id: str = "rule-following"):
        self.ruleset = ruleset or default_ruleset()
        self.backend_id = backend_id
        self.prompts_seen = 0

    def _answer(self, prompt: RenderedPrompt) -> str:
        if prompt.kind is PromptKind.INTERPRETATION:
            return INTERPRETATION_RESPONSE
        pair = prompt.subject
        if prompt.kind is PromptKind.APU:
            return pair.code_before if pair is not None else ""
        if pair is None:
            return "I cannot tell without the pair."

        fired = [r.rule_id for r in fired_rules(pair, self.ruleset)]
        decision = Label.INVALID if fired else Label.VALID
        if prompt.expected_vocabulary is Vocabulary.VALID_INVALID:
            word = "valid" if decision is Label.VALID else "invalid"
        else:
            word = "YES" if decision is Label.VALID else "NO"
        if prompt.kind is PromptKind.FEW_SHOT_COT:
            reason = f"Rules fired: {', '.join(fired)}." if fired else "No rule is violated."
            return f"{reason}\n{word}"
        return word

    async def generate(self, prompt: RenderedPrompt, params: DecodingParams) -> str:
        self.prompts_seen += 1
        return self._answer(prompt)


class ScriptedBackend:
    """Replays responses keyed by the SHA-256 of the prompt text."""

    def __init__(self, responses: Dict[str, str], default: Optional[str] = None, backend_id: str = "scripted"):
        self.responses = dict(responses)
        self.default = default
        self.backend_id = backend_id
        self.requested: List[str] = []

    @classmethod
    def from_file(cls, path, backend_id: str = "scripted") -> "ScriptedBackend":
        """Fixture layout: {"default": optional text, "responses": {prompt_digest: text}}."""
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        return cls(data.get("responses", {}), data.get("default"), backend_id)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"default": self.default, "responses": self.responses}, f, ensure_ascii=False,
                      indent=2, sort_keys=True)
        return path

    async def generate(self, prompt: RenderedPrompt, params: DecodingParams) -> str:
        digest = prompt.digest()
        self.requested.append(digest)
        if digest in self.responses:
            return self.responses[digest]
        if self.default is not None:
            return self.default
        raise GatewayError(f"no scripted response for prompt {digest[:12]}...", digest=digest)
