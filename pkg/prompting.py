"""
Prompt rendering for every LLM stage.

Templates are UTF-8 text assets under templates/ with {name} placeholders.
Renderers are pure: the same inputs always give the same bytes.
"""

import hashlib
import logging
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from string import Formatter
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

from corpus import CommentEditPair, Label
from errors import MissingPlaceholder, NoExemplars, NoNeighbors, PromptError, EmptyRuleSet
from retrieval import DEFAULT_K, Neighbor

if TYPE_CHECKING:
    from rules import ValidationRuleSet

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent / "templates"

COT_INSTRUCTION = "Reason step by step about whether the comment caused the edit, then answer."

# reflection rule sections, in render order
RULE_SECTIONS = (
    ("yes", "Answer “YES” if all are true:"),
    ("no", "Answer “NO” if any are true:"),
    ("valid_pattern", "Patterns observed in valid pairs:"),
    ("invalid_pattern", "Patterns observed in invalid pairs:"),
    ("note", "Additional guidance:"),
)


class PromptKind(str, Enum):
    ZERO_SHOT = "ZeroShot"
    REASONING = "Reasoning"
    REFLECTION = "Reflection"
    FEW_SHOT = "FewShot"
    FEW_SHOT_COT = "FewShotCoT"
    APU = "Apu"
    INTERPRETATION = "Interpretation"


class Vocabulary(str, Enum):
    YES_NO = "YesNo"
    VALID_INVALID = "ValidInvalid"
    CODE_ONLY = "CodeOnly"
    FREE_TEXT = "FreeText"


VOCABULARY_BY_KIND = {
    PromptKind.ZERO_SHOT: Vocabulary.VALID_INVALID,
    PromptKind.REASONING: Vocabulary.YES_NO,
    PromptKind.REFLECTION: Vocabulary.YES_NO,
    PromptKind.FEW_SHOT: Vocabulary.YES_NO,
    PromptKind.FEW_SHOT_COT: Vocabulary.YES_NO,
    PromptKind.APU: Vocabulary.CODE_ONLY,
    PromptKind.INTERPRETATION: Vocabulary.FREE_TEXT,
}

TEMPLATE_FILES = {
    PromptKind.ZERO_SHOT: "zero_shot.txt",
    PromptKind.REASONING: "reasoning.txt",
    PromptKind.REFLECTION: "reflection.txt",
    PromptKind.FEW_SHOT: "few_shot.txt",
    PromptKind.FEW_SHOT_COT: "few_shot.txt",
    PromptKind.APU: "apu.txt",
    PromptKind.INTERPRETATION: "interpretation.txt",
}


@dataclass(frozen=True)
class RenderedPrompt:
    kind: PromptKind
    text: str
    expected_vocabulary: Vocabulary
    # the pair this prompt is about; not part of the prompt bytes
    subject: Optional[CommentEditPair] = None

    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    path = TEMPLATE_DIR / name
    with open(path, "r", encoding="utf-8", newline="") as f:
        return f.read()


def template_fields(template: str) -> List[str]:
    return [name for _, name, _, _ in Formatter().parse(template) if name]


def template_digests() -> Dict[str, str]:
    """SHA-256 of every template asset, for run manifests."""
    return {
        name: hashlib.sha256(load_template(name).encode("utf-8")).hexdigest()
        for name in sorted(set(TEMPLATE_FILES.values()))
    }


def fill_template(name: str, **values: str) -> str:
    template = load_template(name)
    missing = [f for f in template_fields(template) if f not in values]
    if missing:
        raise MissingPlaceholder(f"template {name} needs {missing}", template=name, missing=missing)
    return template.format(**values)


def _render(kind: PromptKind, subject: Optional[CommentEditPair], **values: str) -> RenderedPrompt:
    text = fill_template(TEMPLATE_FILES[kind], **values)
    logger.debug(f"Rendered {kind.value} prompt ({len(text)} chars): {text[:80]!r}")
    return RenderedPrompt(kind=kind, text=text, expected_vocabulary=VOCABULARY_BY_KIND[kind], subject=subject)


def _label_text(label: Optional[Label]) -> str:
    return label.value if label else "Unlabeled"


def _answer_text(label: Label) -> str:
    return "YES" if label is Label.VALID else "NO"


def render_zero_shot(pair: CommentEditPair) -> RenderedPrompt:
    return _render(PromptKind.ZERO_SHOT, pair,
                   code_before=pair.code_before, code_after=pair.code_after, comment=pair.comment_text)


def render_example_block(number: int, pair: CommentEditPair) -> str:
    return (
        f"Example{number}:\n"
        f"Comment: {pair.comment_text}\n"
        f"Code Before: {pair.code_before}\n"
        f"Code After: {pair.code_after}\n"
        f"Label: {_label_text(pair.label)}"
    )


def render_reasoning(pair: CommentEditPair, neighbors: Sequence[Neighbor], k: int = DEFAULT_K) -> RenderedPrompt:
    """Reasoning prompt with neighbors as labeled examples, kept in the given order."""
    if not neighbors:
        raise NoNeighbors(f"no retrieved examples for pair {pair.pair_id!r}", pair_id=pair.pair_id)
    if len(neighbors) > k:
        raise PromptError(f"{len(neighbors)} neighbors exceed k={k}", pair_id=pair.pair_id)
    blocks = []
    for number, neighbor in enumerate(neighbors, start=1):
        if neighbor.payload is None:
            raise PromptError(f"neighbor {neighbor.pair_id!r} has no payload attached",
                              pair_id=neighbor.pair_id)
        blocks.append(render_example_block(number, neighbor.payload))
    return _render(PromptKind.REASONING, pair,
                   k=str(k), examples="\n\n".join(blocks),
                   comment=pair.comment_text, code_before=pair.code_before, code_after=pair.code_after)


def render_decision_rules(ruleset: "ValidationRuleSet") -> str:
    guidance = [r for r in ruleset.rules if r.is_guidance()]
    if not guidance:
        raise EmptyRuleSet("ruleset has no guidance rules to render")
    grouped: Dict[str, List[str]] = {}
    for rule in guidance:
        section = rule.predicate_spec.get("section", "note")
        if section not in dict(RULE_SECTIONS):
            section = "note"
        grouped.setdefault(section, []).append(rule.text)
    parts = []
    for section, heading in RULE_SECTIONS:
        if section in grouped:
            parts.append("\n".join([heading] + [f"- {text}" for text in grouped[section]]))
    return "\n\n".join(parts)


def render_reflection(pair: CommentEditPair, ruleset: "ValidationRuleSet") -> RenderedPrompt:
    return _render(PromptKind.REFLECTION, pair,
                   decision_rules=render_decision_rules(ruleset),
                   code_before=pair.code_before, code_after=pair.code_after, comment=pair.comment_text)


def render_few_shot(pair: CommentEditPair, exemplars: Sequence[CommentEditPair], cot: bool = False) -> RenderedPrompt:
    """Zero-shot skeleton preceded by labeled exemplars; answers are YES/NO."""
    labeled = [e for e in exemplars if e.label is not None]
    if not labeled:
        raise NoExemplars("few-shot prompting needs at least one labeled exemplar")
    if len(labeled) != len(exemplars):
        raise NoExemplars("every few-shot exemplar must carry a label")
    blocks = []
    for number, ex in enumerate(labeled, start=1):
        blocks.append(
            f"Example{number}:\n"
            f"Code Before:\n{ex.code_before}\n"
            f"Code After:\n{ex.code_after}\n"
            f"Comment:\n{ex.comment_text}\n"
            f"Answer: {_answer_text(ex.label)}"
        )
    kind = PromptKind.FEW_SHOT_COT if cot else PromptKind.FEW_SHOT
    return _render(kind, pair,
                   examples="\n\n".join(blocks),
                   code_before=pair.code_before, code_after=pair.code_after, comment=pair.comment_text,
                   cot_instruction=COT_INSTRUCTION + "\n" if cot else "")


def render_apu(code_before: str, comment: str, subject: Optional[CommentEditPair] = None) -> RenderedPrompt:
    return _render(PromptKind.APU, subject, code_before=code_before, comment=comment)


def render_interpretation(pairs: Sequence[CommentEditPair], batch_number: int, batch_count: int) -> RenderedPrompt:
    """Batch prompt asking for YES/NO pattern lines over labeled pairs."""
    blocks = [render_example_block(i, p) for i, p in enumerate(pairs, start=1)]
    return _render(PromptKind.INTERPRETATION, None,
                   batch_number=str(batch_number), batch_count=str(batch_count),
                   examples="\n\n".join(blocks))
