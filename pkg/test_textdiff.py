#!/usr/bin/env python3
"""
Tests for line diffs, code tokenization and comment/code overlap
"""

import numpy as np
import pytest

from textdiff import (
    TokenDelta,
    apply_line_diff,
    comment_content_tokens,
    lexical_overlap,
    line_diff,
    load_word_list,
    pair_delta,
    split_lines,
    tokenize_code,
)


def test_single_line_change():
    diff = line_diff("a\nb\nc", "a\nx\nc")
    assert diff.removed_lines == [(1, "b")]
    assert diff.added_lines == [(1, "x")]


def test_identical_texts_give_empty_diff():
    assert line_diff("x = 1\ny = 2", "x = 1\ny = 2").is_empty()


def test_crlf_is_normalized():
    assert split_lines("a\r\nb\rc") == ["a", "b", "c"]
    assert line_diff("a\r\nb", "a\nb").is_empty()


@pytest.mark.parametrize("before, after", [
    ("", "x"),
    ("x", ""),
    ("a", "a\nb"),
    ("a\nb\nc\nd", "b\nc\ne\nd\nf"),
    ("for i in r:\n    s += i", "s = sum(r)"),
])
def test_apply_line_diff_rebuilds_after(before, after):
    assert apply_line_diff(before, line_diff(before, after)) == after


def test_apply_line_diff_random_texts():
    rng = np.random.default_rng(3)
    alphabet = ["a", "b", "c", "d"]
    for _ in range(200):
        before = "\n".join(rng.choice(alphabet, size=int(rng.integers(0, 7))))
        after = "\n".join(rng.choice(alphabet, size=int(rng.integers(0, 7))))
        assert apply_line_diff(before, line_diff(before, after)) == after


def test_tokenize_code():
    assert tokenize_code("foo_bar(x1) + 42") == ["foo_bar", "x1", "42"]


def test_pair_delta_tokens():
    delta = pair_delta("total = 0", "total = sum(xs)")
    assert delta.removed_tokens["total"] == 1
    assert delta.changed_tokens() == frozenset({"total", "0", "sum", "xs"})


def test_comment_tokens_drop_stopwords_and_repeats():
    assert comment_content_tokens("Use the `sum` of the sum") == ["use", "sum"]


def test_lexical_overlap():
    score = lexical_overlap("Use sum here", pair_delta("total = 0", "total = sum(xs)"))
    assert score.count == 1
    assert score.ratio == pytest.approx(1 / 3)


def test_overlap_with_empty_delta():
    assert lexical_overlap("the", TokenDelta()).count == 0
    assert lexical_overlap("rename foo", TokenDelta()).ratio == 0.0


def test_word_lists_are_lowercase_and_uncommented():
    gratitude = load_word_list("gratitude")
    assert "thank you" in gratitude
    assert all(not w.startswith("#") for w in gratitude)
    assert "the" in load_word_list("stopwords")
