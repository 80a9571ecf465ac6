#!/usr/bin/env python3
"""
Tests for the machine-checkable rules, ruleset storage and the knowledge-base
interpretation pass
"""

import asyncio
from collections import Counter
from datetime import timedelta

import numpy as np
import pytest

from cache import content_digest
from conftest import T0, make_pair
from corpus import Label, corpus_digest
from errors import InsufficientLabels, InvalidRuleSet
from llm_gateway import LLMGateway, Stage, Verdict
from mock_backends import RuleFollowingBackend
from rules import (
    InterpretationConfig,
    Provenance,
    RuleDirection,
    RuleKind,
    ValidationRule,
    ValidationRuleSet,
    apply_machine_rules,
    default_ruleset,
    fired_rules,
    gratitude_only,
    interpret_knowledge_base,
    load_ruleset,
    machine_oracle,
    parse_pattern_lines,
    save_ruleset,
    stratified_sample,
)
from textdiff import TokenDelta

GRATITUDE_ONLY = [
    "Thanks!",
    "Thank you, works fine.",
    "Great answer",
    "Perfect",
    "Awesome, thanks",
    "nice",
    "Thanks a lot!",
    "thank you so much",
    "Perfect, works fine now",
    "Awesome answer",
]

NOT_GRATITUDE_ONLY = [
    "Thanks, but you should use `sum`",
    "Thanks, fix the greeting",
    "Thanks, `hello` is friendlier",
    "Thanks, hello reads better",
    "Say hello instead",
]


def greeting_pair(comment):
    return make_pair(comment=comment, before="print('hi')", after="print('hello')")


def ids(rules):
    return [r.rule_id for r in rules]


@pytest.mark.parametrize("comment", GRATITUDE_ONLY)
def test_gratitude_only_comments_fire_r1(comment):
    assert "R1" in ids(fired_rules(greeting_pair(comment), default_ruleset()))


@pytest.mark.parametrize("comment", NOT_GRATITUDE_ONLY)
def test_actionable_comments_do_not_fire_r1(comment):
    assert "R1" not in ids(fired_rules(greeting_pair(comment), default_ruleset()))


def test_fired_rules_on_sample(soup_pairs):
    fired = {p.pair_id: ids(fired_rules(p, default_ruleset())) for p in soup_pairs}
    assert fired == {
        "soup-001": [],
        "soup-002": [],
        "soup-003": ["R1", "R3"],
        "soup-004": ["R2", "R3"],
        "soup-005": [],
    }
    assert [machine_oracle(p) for p in soup_pairs] == [p.label for p in soup_pairs]


def test_comment_after_edit_forces_invalid():
    pair = make_pair(comment_time=T0 + timedelta(hours=1), edit_time=T0)
    outcome = apply_machine_rules(pair, Verdict(Label.VALID, Stage.REASONING, "YES"), default_ruleset())
    assert outcome.violations == ["R2"]
    assert outcome.changed
    assert outcome.corrected.decision is Label.INVALID
    assert outcome.corrected.source_stage is Stage.MACHINE_RULE
    assert outcome.corrected.raw_evidence.startswith("R2:")


def test_missing_timestamps_never_fire_r2():
    pair = make_pair(comment_time=None, edit_time=T0)
    assert "R2" not in ids(fired_rules(pair, default_ruleset()))


def test_flag_only_rule_keeps_the_verdict():
    pair = greeting_pair("Which version of Python is this?")
    initial = Verdict(Label.VALID, Stage.ZERO_SHOT, "valid")
    outcome = apply_machine_rules(pair, initial, default_ruleset())
    assert outcome.violations == ["R3"]
    assert outcome.corrected is initial
    assert not outcome.changed


def test_forces_valid_direction():
    rule = ValidationRule("V1", RuleKind.MACHINE_CHECK, RuleDirection.FORCES_VALID,
                          "Late comments are accepted.", {"check": "comment_after_edit", "temporal": True})
    ruleset = ValidationRuleSet((rule,), Provenance.DEFAULT_STATIC, "test")
    pair = make_pair(comment_time=T0 + timedelta(minutes=5), edit_time=T0)
    outcome = apply_machine_rules(pair, Verdict(Label.INVALID, Stage.REFLECTION, "NO"), ruleset)
    assert outcome.corrected.decision is Label.VALID


def test_apply_machine_rules_is_idempotent():
    rng = np.random.default_rng(11)
    comments = GRATITUDE_ONLY + NOT_GRATITUDE_ONLY + ["Which version is this?", "Use `print` here."]
    codes = [("print('hi')", "print('hello')"), ("x = 1", "x = 2"), ("total = 0", "total = sum(xs)"), ("a", "a")]
    ruleset = default_ruleset()
    for i in range(1000):
        before, after = codes[int(rng.integers(len(codes)))]
        times = [None, T0, T0 + timedelta(hours=1)]
        pair = make_pair(pair_id=f"f{i}", comment=comments[int(rng.integers(len(comments)))],
                         before=before, after=after,
                         comment_time=times[int(rng.integers(3))], edit_time=times[int(rng.integers(3))])
        initial = Verdict(Label.VALID if rng.random() < 0.5 else Label.INVALID, Stage.REASONING, "")
        first = apply_machine_rules(pair, initial, ruleset)
        second = apply_machine_rules(pair, first.corrected, ruleset)
        assert second.corrected.decision is first.corrected.decision
        assert not second.changed
        assert second.violations == first.violations
        if {"R1", "R2"} & set(first.violations):
            assert first.corrected.decision is Label.INVALID
        else:
            assert first.corrected.decision is initial.decision


def test_default_ruleset_layout():
    ruleset = default_ruleset()
    assert ids(ruleset.rules) == ["R1", "R2", "R3", "G1", "G2", "G3", "G4", "G5", "G6", "G7"]
    assert len(ruleset.machine_rules()) == 3
    assert len(ruleset.guidance_rules()) == 7
    assert ruleset.provenance is Provenance.DEFAULT_STATIC
    assert ruleset.get("R3").predicate_spec["min_overlap"] == 1
    assert default_ruleset(min_overlap=2).get("R3").predicate_spec["min_overlap"] == 2


def test_ruleset_save_and_load(tmp_path):
    ruleset = default_ruleset()
    path = save_ruleset(ruleset, tmp_path / "rules" / "ruleset.json")
    loaded = load_ruleset(path)
    assert loaded == ruleset
    assert loaded.digest() == ruleset.digest()
    assert path.read_text(encoding="utf-8").endswith("}\n")


def test_invalid_rules():
    with pytest.raises(InvalidRuleSet):
        ValidationRule("G9", RuleKind.GUIDANCE, RuleDirection.FORCES_INVALID, "x")
    with pytest.raises(InvalidRuleSet):
        ValidationRule("R9", RuleKind.MACHINE_CHECK, RuleDirection.FLAGS_ONLY, "x", {"check": "astrology"})
    with pytest.raises(InvalidRuleSet):
        ValidationRule("R9", RuleKind.MACHINE_CHECK, RuleDirection.FLAGS_ONLY, "x",
                       {"check": "no_overlap_no_directive", "min_overlap": 1})
    with pytest.raises(InvalidRuleSet):
        ValidationRuleSet((), Provenance.DEFAULT_STATIC, "static")
    rule = default_ruleset().rules[0]
    with pytest.raises(InvalidRuleSet):
        ValidationRuleSet((rule, rule), Provenance.DEFAULT_STATIC, "static")
    with pytest.raises(InvalidRuleSet):
        ValidationRule.from_dict({"rule_id": "X", "kind": "Oracle", "direction": "FlagsOnly", "text": "x"})


def test_load_ruleset_rejects_other_json(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"hello": "world"}\n', encoding="utf-8")
    with pytest.raises(InvalidRuleSet):
        load_ruleset(path)


def test_parse_pattern_lines():
    raw = "Patterns:\n- YES: names a changed identifier\n* no:  only thanks \nsomething else\n-YES:asks for a fix"
    assert parse_pattern_lines(raw) == [
        ("valid_pattern", "names a changed identifier"),
        ("invalid_pattern", "only thanks"),
        ("valid_pattern", "asks for a fix"),
    ]
    assert parse_pattern_lines("no patterns here") == []


def test_stratified_sample():
    pairs = [make_pair(pair_id=f"v{i}", label=Label.VALID) for i in range(10)]
    pairs += [make_pair(pair_id=f"i{i}", label=Label.INVALID) for i in range(4)]
    sample = stratified_sample(pairs, 6, seed=3)
    assert sum(p.label is Label.VALID for p in sample) == 3
    assert sum(p.label is Label.INVALID for p in sample) == 3
    positions = [pairs.index(p) for p in sample]
    assert positions == sorted(positions)
    assert sample == stratified_sample(pairs, 6, seed=3)
    assert len(stratified_sample(pairs, 20, seed=3)) == 14


def test_interpretation_derives_and_stores_rules(tmp_path, toy_pairs):
    backend = RuleFollowingBackend()
    config = InterpretationConfig(sample_size=8, batch_size=4, seed=0)
    ruleset = asyncio.run(interpret_knowledge_base(toy_pairs, LLMGateway(backend), config, tmp_path))
    assert backend.prompts_seen == 2
    assert ruleset.provenance is Provenance.LLM_DERIVED
    assert ruleset.created_from == corpus_digest(toy_pairs)
    assert ids(ruleset.rules)[10:] == ["L1", "L2"]
    assert ruleset.get("L1").predicate_spec == {"section": "valid_pattern"}
    assert ruleset.get("L2").predicate_spec == {"section": "invalid_pattern"}
    assert (tmp_path / f"ruleset-{content_digest(corpus_digest(toy_pairs), 1)[:16]}.json").exists()

    again = RuleFollowingBackend()
    reloaded = asyncio.run(interpret_knowledge_base(toy_pairs, LLMGateway(again), config, tmp_path))
    assert again.prompts_seen == 0
    assert reloaded == ruleset


def test_interpretation_needs_both_labels():
    pairs = [make_pair(pair_id=f"v{i}", label=Label.VALID) for i in range(3)]
    with pytest.raises(InsufficientLabels):
        asyncio.run(interpret_knowledge_base(pairs, LLMGateway(RuleFollowingBackend())))


def test_interpretation_keeps_configured_overlap_threshold(tmp_path, toy_pairs):
    strict = InterpretationConfig(sample_size=8, batch_size=4, seed=0, min_overlap=2)
    derived = asyncio.run(interpret_knowledge_base(toy_pairs, LLMGateway(RuleFollowingBackend()), strict, tmp_path))
    assert derived.rules[2].rule_id == "R3"
    assert derived.rules[2].predicate_spec["min_overlap"] == 2

    # a stored ruleset for another threshold is not reused
    loose = InterpretationConfig(sample_size=8, batch_size=4, seed=0, min_overlap=1)
    backend = RuleFollowingBackend()
    other = asyncio.run(interpret_knowledge_base(toy_pairs, LLMGateway(backend), loose, tmp_path))
    assert backend.prompts_seen == 2
    assert other.get("R3").predicate_spec["min_overlap"] == 1
    assert len(list(tmp_path.glob("ruleset-*.json"))) == 2


def test_gratitude_only_reads_overlap_allowance():
    spec = dict(default_ruleset().get("R1").predicate_spec)
    delta = TokenDelta(added_tokens=Counter({"total": 1}))
    assert not gratitude_only("Thanks, total is right", spec, delta)
    spec["max_overlap"] = 1
    assert gratitude_only("Thanks, total is right", spec, delta)
