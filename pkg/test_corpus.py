#!/usr/bin/env python3
"""
Tests for corpus loading, canonical saving, splitting and stats
"""

import pytest

from conftest import SOUP_CSV, SOUP_SAMPLE, TOY_CORPUS, make_pair
from corpus import (
    CorpusFormat,
    Label,
    SplitSpec,
    corpus_digest,
    corpus_stats,
    dump_pair,
    guess_format,
    load_corpus,
    parse_label,
    save_corpus,
    split_corpus,
)
from errors import DuplicateId, EmptyCorpus, MalformedRecord, RatioSum, UnknownSplitTag


def test_soup_sample_is_canonical():
    pairs = load_corpus(SOUP_SAMPLE)
    lines = SOUP_SAMPLE.read_text(encoding="utf-8").splitlines()
    assert [p.pair_id for p in pairs] == ["soup-001", "soup-002", "soup-003", "soup-004", "soup-005"]
    assert [dump_pair(p) for p in pairs] == lines


def test_save_corpus_reproduces_file_bytes(tmp_path):
    pairs = load_corpus(SOUP_SAMPLE)
    out = save_corpus(pairs, tmp_path / "copy.jsonl")
    assert out.read_bytes() == SOUP_SAMPLE.read_bytes()
    assert corpus_digest(load_corpus(out)) == corpus_digest(pairs)


def test_csv_matches_jsonl():
    assert guess_format(SOUP_CSV) is CorpusFormat.CSV
    assert load_corpus(SOUP_CSV, CorpusFormat.CSV) == load_corpus(SOUP_SAMPLE)


def test_optional_fields_absent():
    last = load_corpus(SOUP_SAMPLE)[-1]
    assert last.comment_time is None and last.edit_time is None
    assert last.language_tag is None
    assert last.label is Label.VALID


def test_extra_keys_survive(tmp_path):
    pairs = load_corpus(TOY_CORPUS)
    assert pairs[0].extra_value("split") == "train"
    out = save_corpus(pairs, tmp_path / "toy.jsonl")
    assert out.read_bytes() == TOY_CORPUS.read_bytes()


def test_missing_comment_is_malformed(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text(
        '{"pair_id": "a", "comment_text": "fix it", "code_before": "x = 1"}\n'
        '{"pair_id": "b", "comment_text": "  ", "code_before": "x = 1"}\n',
        encoding="utf-8",
    )
    with pytest.raises(MalformedRecord) as info:
        load_corpus(path)
    assert info.value.line == 2


def test_invalid_json_is_malformed(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"pair_id": "a",\n', encoding="utf-8")
    with pytest.raises(MalformedRecord):
        load_corpus(path)


def test_duplicate_ids_rejected(tmp_path):
    record = '{"pair_id": "a", "comment_text": "c", "code_before": "x"}\n'
    path = tmp_path / "dup.jsonl"
    path.write_text(record * 2, encoding="utf-8")
    with pytest.raises(DuplicateId):
        load_corpus(path)


def test_empty_corpus(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("\n", encoding="utf-8")
    with pytest.raises(EmptyCorpus):
        load_corpus(path)


def test_unparseable_timestamp_becomes_absent(tmp_path):
    path = tmp_path / "ts.jsonl"
    path.write_text('{"pair_id": "a", "comment_text": "c", "code_before": "x", '
                    '"comment_time": "yesterday", "edit_time": "2020-01-01T00:00:00+02:00"}\n',
                    encoding="utf-8")
    pair = load_corpus(path)[0]
    assert pair.comment_time is None
    assert pair.edit_time.hour == 22


@pytest.mark.parametrize("raw, expected", [
    ("YES", Label.VALID), (1, Label.VALID), ("valid", Label.VALID),
    ("No", Label.INVALID), ("0", Label.INVALID), (False, Label.INVALID),
    ("", None), (None, None),
])
def test_parse_label(raw, expected):
    assert parse_label(raw) is expected


def test_parse_label_rejects_unknown():
    with pytest.raises(ValueError):
        parse_label("maybe")


def test_split_by_field():
    split = split_corpus(load_corpus(TOY_CORPUS), SplitSpec(field="split"))
    assert split.sizes() == (24, 6, 10)
    assert split.by_name("dev") is split.validation


def test_split_by_ratios_is_seeded_and_ordered():
    pairs = [make_pair(pair_id=f"p{i}") for i in range(10)]
    first = split_corpus(pairs, SplitSpec(ratios=(0.8, 0.1, 0.1), seed=7))
    second = split_corpus(pairs, SplitSpec(ratios=(0.8, 0.1, 0.1), seed=7))
    assert first == second
    assert first.sizes() == (8, 1, 1)
    ids = [p.pair_id for p in first.train]
    assert ids == sorted(ids, key=lambda s: int(s[1:]))
    everything = {p.pair_id for p in first.train + first.validation + first.test}
    assert everything == {p.pair_id for p in pairs}


def test_bad_ratios():
    with pytest.raises(RatioSum):
        split_corpus([make_pair()], SplitSpec(ratios=(0.5, 0.5, 0.5)))


def test_unknown_split_tag():
    with pytest.raises(UnknownSplitTag):
        split_corpus([make_pair(split="holdout")], SplitSpec(field="split"))


def test_corpus_stats():
    stats = corpus_stats(load_corpus(TOY_CORPUS))
    assert (stats.total, stats.valid, stats.invalid, stats.unlabeled) == (40, 21, 19, 0)
    assert stats.valid_ratio == pytest.approx(21 / 40)
