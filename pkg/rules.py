"""
Validation rules: the default reflection ruleset, machine-checkable predicates,
rule application against a verdict, and the one-time interpretation pass that
derives extra guidance from a labeled knowledge base.
"""

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cache import content_digest
from corpus import CommentEditPair, Label, corpus_digest
from errors import InsufficientLabels, InvalidRuleSet
from llm_gateway import LLMGateway, Stage, Verdict
from prompting import render_interpretation
from textdiff import TokenDelta, lexical_overlap, load_word_list, pair_delta

logger = logging.getLogger(__name__)


class RuleKind(str, Enum):
    MACHINE_CHECK = "MachineCheck"
    GUIDANCE = "Guidance"


class RuleDirection(str, Enum):
    FORCES_INVALID = "ForcesInvalid"
    FORCES_VALID = "ForcesValid"
    FLAGS_ONLY = "FlagsOnly"


class Provenance(str, Enum):
    DEFAULT_STATIC = "DefaultStatic"
    LLM_DERIVED = "LlmDerived"


@dataclass(frozen=True)
class ValidationRule:
    rule_id: str
    kind: RuleKind
    direction: RuleDirection
    text: str
    predicate_spec: Dict[str, Any] = field(default_factory=dict, hash=False)

    def __post_init__(self):
        if self.kind is RuleKind.GUIDANCE and self.direction is not RuleDirection.FLAGS_ONLY:
            raise InvalidRuleSet(f"guidance rule {self.rule_id} must be FlagsOnly", rule_id=self.rule_id)
        if self.kind is RuleKind.MACHINE_CHECK:
            check = self.predicate_spec.get("check")
            if check not in PREDICATES:
                raise InvalidRuleSet(f"rule {self.rule_id} has unknown check {check!r}", rule_id=self.rule_id)
            missing = [p for p in REQUIRED_PARAMS[check] if p not in self.predicate_spec]
            if missing:
                raise InvalidRuleSet(f"rule {self.rule_id} is missing {missing}", rule_id=self.rule_id)

    def is_guidance(self) -> bool:
        return self.kind is RuleKind.GUIDANCE

    def is_machine_check(self) -> bool:
        return self.kind is RuleKind.MACHINE_CHECK

    def to_dict(self) -> Dict[str, Any]:
        return {
            "rule_id": self.rule_id,
            "kind": self.kind.value,
            "direction": self.direction.value,
            "text": self.text,
            "predicate_spec": self.predicate_spec,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ValidationRule":
        try:
            return cls(
                rule_id=str(data["rule_id"]),
                kind=RuleKind(data["kind"]),
                direction=RuleDirection(data["direction"]),
                text=str(data["text"]),
                predicate_spec=dict(data.get("predicate_spec") or {}),
            )
        except (KeyError, ValueError) as e:
            raise InvalidRuleSet(f"bad rule record {data!r}: {e}") from e


@dataclass(frozen=True)
class ValidationRuleSet:
    rules: Tuple[ValidationRule, ...]
    provenance: Provenance
    created_from: str

    def __post_init__(self):
        if not self.rules:
            raise InvalidRuleSet("ruleset must contain at least one rule")
        ids = [r.rule_id for r in self.rules]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise InvalidRuleSet(f"duplicate rule ids {duplicates}", duplicates=duplicates)

    def machine_rules(self) -> List[ValidationRule]:
        return [r for r in self.rules if r.is_machine_check()]

    def guidance_rules(self) -> List[ValidationRule]:
        return [r for r in self.rules if r.is_guidance()]

    def get(self, rule_id: str) -> Optional[ValidationRule]:
        return next((r for r in self.rules if r.rule_id == rule_id), None)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "provenance": self.provenance.value,
            "created_from": self.created_from,
            "rules": [r.to_dict() for r in self.rules],
        }

    def digest(self) -> str:
        return content_digest(self.to_dict())


@dataclass(frozen=True)
class RuleOutcome:
    violations: List[str]
    corrected: Verdict
    changed: bool


@dataclass(frozen=True)
class InterpretationConfig:
    sample_size: int = 200
    batch_size: int = 20
    seed: int = 0
    min_overlap: int = 1


# Decision conditions of the reflection prompt, in display order.
GUIDANCE_TEXTS = (
    ("G1", "yes", "The comment implies or requests a change addressed by the edit."),
    ("G2", "yes", "There is semantic or lexical overlap between the comment and changed code."),
    ("G3", "yes", "The comment appears before the edit and could have triggered it."),
    ("G4", "no", "The comment is gratitude-only or approval-only."),
    ("G5", "no", "The comment discusses something unrelated to the code changes."),
    ("G6", "no", "The edit fixes an issue not mentioned in the comment."),
    ("G7", "no", "The comment occurs after the edit."),
)

BACKTICK_RE = re.compile(r"`[^`]+`")


def _phrase_pattern(phrases: Sequence[str]) -> re.Pattern:
    alternatives = sorted((re.escape(p.lower()) for p in phrases), key=len, reverse=True)
    return re.compile(r"\b(?:" + "|".join(alternatives) + r")\b", re.IGNORECASE)


def contains_any(text: str, phrases: Sequence[str]) -> bool:
    if not phrases:
        return False
    return _phrase_pattern(tuple(phrases)).search(text) is not None


def gratitude_only(comment: str, spec: Dict[str, Any], delta: Optional[TokenDelta] = None) -> bool:
    """Thanks/approval with no action verb, no backticked span and no overlap with the change."""
    if not contains_any(comment, spec["gratitude_words"]):
        return False
    if contains_any(comment, spec["fix_words"]):
        return False
    if spec.get("require_no_backticks", True) and BACKTICK_RE.search(comment):
        return False
    return lexical_overlap(comment, delta or TokenDelta()).count <= spec.get("max_overlap", 0)


def comment_after_edit(pair: CommentEditPair, spec: Dict[str, Any]) -> bool:
    # vacuous on partial data
    if pair.comment_time is None or pair.edit_time is None:
        return False
    return pair.comment_time > pair.edit_time


def no_overlap_no_directive(comment: str, spec: Dict[str, Any], delta: Optional[TokenDelta] = None) -> bool:
    overlap = lexical_overlap(comment, delta or TokenDelta())
    return overlap.count < spec["min_overlap"] and not contains_any(comment, spec["directive_words"])


PREDICATES: Dict[str, Callable[[CommentEditPair, Dict[str, Any], TokenDelta], bool]] = {
    "gratitude_only": lambda pair, spec, delta: gratitude_only(pair.comment_text, spec, delta),
    "comment_after_edit": lambda pair, spec, delta: comment_after_edit(pair, spec),
    "no_overlap_no_directive": lambda pair, spec, delta: no_overlap_no_directive(pair.comment_text, spec, delta),
}

REQUIRED_PARAMS = {
    "gratitude_only": ("gratitude_words", "fix_words"),
    "comment_after_edit": ("temporal",),
    "no_overlap_no_directive": ("min_overlap", "directive_words"),
}


def default_machine_rules(min_overlap: int = 1) -> List[ValidationRule]:
    gratitude = list(load_word_list("gratitude"))
    fix_words = list(load_word_list("fix_words"))
    return [
        ValidationRule(
            "R1", RuleKind.MACHINE_CHECK, RuleDirection.FORCES_INVALID,
            "The comment is gratitude-only or approval-only.",
            {"check": "gratitude_only", "gratitude_words": gratitude, "fix_words": fix_words,
             "require_no_backticks": True, "max_overlap": 0},
        ),
        ValidationRule(
            "R2", RuleKind.MACHINE_CHECK, RuleDirection.FORCES_INVALID,
            "The comment occurs after the edit.",
            {"check": "comment_after_edit", "temporal": True},
        ),
        ValidationRule(
            "R3", RuleKind.MACHINE_CHECK, RuleDirection.FLAGS_ONLY,
            "The comment shares no code term with the change and contains no directive verb.",
            {"check": "no_overlap_no_directive", "min_overlap": min_overlap, "directive_words": fix_words},
        ),
    ]


def default_guidance_rules() -> List[ValidationRule]:
    return [
        ValidationRule(rule_id, RuleKind.GUIDANCE, RuleDirection.FLAGS_ONLY, text, {"section": section})
        for rule_id, section, text in GUIDANCE_TEXTS
    ]


def default_ruleset(min_overlap: int = 1) -> ValidationRuleSet:
    """Three machine checks followed by the seven guidance conditions."""
    return ValidationRuleSet(
        rules=tuple(default_machine_rules(min_overlap) + default_guidance_rules()),
        provenance=Provenance.DEFAULT_STATIC,
        created_from="static",
    )


def evaluate_rule(rule: ValidationRule, pair: CommentEditPair, delta: TokenDelta) -> bool:
    if not rule.is_machine_check():
        return False
    return bool(PREDICATES[rule.predicate_spec["check"]](pair, rule.predicate_spec, delta))


def fired_rules(pair: CommentEditPair, ruleset: ValidationRuleSet) -> List[ValidationRule]:
    delta = pair_delta(pair.code_before, pair.code_after)
    return [r for r in ruleset.machine_rules() if evaluate_rule(r, pair, delta)]


def apply_machine_rules(pair: CommentEditPair, initial: Verdict, ruleset: ValidationRuleSet) -> RuleOutcome:
    fired = fired_rules(pair, ruleset)
    forcing = next((r for r in fired if r.direction is not RuleDirection.FLAGS_ONLY), None)

    corrected = initial
    if forcing is not None:
        forced = Label.INVALID if forcing.direction is RuleDirection.FORCES_INVALID else Label.VALID
        if forced is not initial.decision:
            corrected = Verdict(forced, Stage.MACHINE_RULE, f"{forcing.rule_id}: {forcing.text}")

    if fired:
        logger.debug(f"Pair {pair.pair_id}: rules fired {[r.rule_id for r in fired]}")
    return RuleOutcome(
        violations=[r.rule_id for r in fired],
        corrected=corrected,
        changed=corrected.decision is not initial.decision,
    )


def machine_oracle(pair: CommentEditPair, ruleset: Optional[ValidationRuleSet] = None) -> Label:
    """Invalid when any machine rule fires on the pair, Valid otherwise."""
    return Label.INVALID if fired_rules(pair, ruleset or default_ruleset()) else Label.VALID


def save_ruleset(ruleset: ValidationRuleSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(ruleset.to_dict(), f, ensure_ascii=False, indent=2)
        f.write("\n")
    return path


def load_ruleset(path) -> ValidationRuleSet:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    try:
        provenance = Provenance(data["provenance"])
        rules = tuple(ValidationRule.from_dict(r) for r in data["rules"])
    except (KeyError, ValueError, TypeError) as e:
        raise InvalidRuleSet(f"{path} is not a ruleset file: {e}") from e
    return ValidationRuleSet(rules=rules, provenance=provenance, created_from=str(data.get("created_from", "")))


PATTERN_LINE_RE = re.compile(r"^\s*[-*]\s*(YES|NO)\s*:\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


def parse_pattern_lines(raw_text: str) -> List[Tuple[str, str]]:
    """Extract (section, text) from '- YES: ...' / '- NO: ...' lines."""
    patterns = []
    for answer, text in PATTERN_LINE_RE.findall(raw_text):
        section = "valid_pattern" if answer.upper() == "YES" else "invalid_pattern"
        patterns.append((section, text))
    return patterns


def stratified_sample(pairs: Sequence[CommentEditPair], sample_size: int, seed: int) -> List[CommentEditPair]:
    """Equal share per label, drawn with a seeded generator, returned in source order."""
    rng = np.random.default_rng(seed)
    per_class = max(1, sample_size // 2)
    chosen: List[int] = []
    for label in (Label.VALID, Label.INVALID):
        idx = [i for i, p in enumerate(pairs) if p.label is label]
        take = min(per_class, len(idx))
        chosen.extend(int(i) for i in rng.choice(idx, size=take, replace=False))
    return [pairs[i] for i in sorted(chosen)]


def _normalized(text: str) -> str:
    return " ".join(text.lower().split())


async def interpret_knowledge_base(pairs: Sequence[CommentEditPair], gateway: LLMGateway,
                                   config: InterpretationConfig = InterpretationConfig(),
                                   store_dir=None) -> ValidationRuleSet:
    """Derive guidance rules from the knowledge base once per corpus digest."""
    labeled = [p for p in pairs if p.label is not None]
    n_valid = sum(1 for p in labeled if p.label is Label.VALID)
    n_invalid = len(labeled) - n_valid
    if n_valid == 0 or n_invalid == 0:
        raise InsufficientLabels(f"need both labels, got {n_valid} valid and {n_invalid} invalid",
                                 valid=n_valid, invalid=n_invalid)

    digest = corpus_digest(pairs)
    store_key = content_digest(digest, config.min_overlap)
    store_path = Path(store_dir) / f"ruleset-{store_key[:16]}.json" if store_dir else None
    if store_path is not None and store_path.exists():
        logger.info(f"Loaded ruleset for corpus {digest[:12]}... from {store_path}")
        return load_ruleset(store_path)

    sample = stratified_sample(labeled, config.sample_size, config.seed)
    batches = [sample[i:i + config.batch_size] for i in range(0, len(sample), config.batch_size)]
    logger.info(f"Interpreting {len(sample)} sampled pairs in {len(batches)} batches")

    base = default_ruleset(config.min_overlap)
    seen = {_normalized(r.text) for r in base.guidance_rules()}
    derived: List[ValidationRule] = []
    for number, batch in enumerate(batches, start=1):
        prompt = render_interpretation(batch, number, len(batches))
        result = await gateway.complete(prompt)
        patterns = parse_pattern_lines(result.raw_text)
        if not patterns:
            logger.warning(f"Interpretation batch {number} produced no pattern lines")
        for section, text in patterns:
            key = _normalized(text)
            if key in seen:
                continue
            seen.add(key)
            derived.append(ValidationRule(f"L{len(derived) + 1}", RuleKind.GUIDANCE, RuleDirection.FLAGS_ONLY,
                                          text, {"section": section}))

    ruleset = ValidationRuleSet(rules=base.rules + tuple(derived), provenance=Provenance.LLM_DERIVED,
                                created_from=digest)
    if store_path is not None:
        save_ruleset(ruleset, store_path)
        logger.info(f"Saved ruleset with {len(derived)} derived rules to {store_path}")
    return ruleset
