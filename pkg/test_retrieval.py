#!/usr/bin/env python3
"""
Tests for embeddings, the exact cosine index and pair-level retrieval
"""

import time

import numpy as np
import pytest

from cache import ContentCache
from corpus import SplitSpec, split_corpus
from errors import DimensionMismatch, MixedDimensions, RetrievalError, ZeroVector
from retrieval import (
    EmbeddingVector,
    HashingEmbeddingBackend,
    IndexedRecord,
    Retriever,
    build_index,
    cosine,
    embed_many,
    index_pairs,
    load_index,
    render_retrieval_text,
)


def random_index(rng, n, dim, duplicates=3):
    raw = [rng.normal(size=dim) for _ in range(n)]
    # exact duplicates exercise tie order
    for _ in range(min(duplicates, n)):
        raw.append(raw[int(rng.integers(len(raw)))].copy())
    vectors = [EmbeddingVector(v) for v in raw]
    records = [IndexedRecord(f"r{i}", v.normalized(), None) for i, v in enumerate(vectors)]
    return build_index(records), vectors


def brute_force(vectors, q, k):
    sims = [(cosine(v, q), i) for i, v in enumerate(vectors)]
    ordered = sorted(sims, key=lambda t: (-t[0], t[1]))
    return [f"r{i}" for _, i in ordered[:k]]


def test_top_k_matches_brute_force_on_fuzzed_corpora():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    for _ in range(200):
        n = int(rng.integers(1, 98))
        dim = int(rng.integers(8, 129))
        index, vectors = random_index(rng, n, dim)
        for _ in range(3):
            q = EmbeddingVector(rng.normal(size=dim))
            k = int(rng.integers(1, 8))
            got = [nb.pair_id for nb in index.query_top_k(q, k)]
            assert got == brute_force(vectors, q, k)
    assert time.perf_counter() - start < 5.0


def test_duplicate_vectors_keep_insertion_order():
    v = EmbeddingVector(np.array([1.0, 2.0, 3.0]))
    records = [IndexedRecord(pid, v.normalized(), None) for pid in ("b", "a", "c")]
    index = build_index(records)
    assert [n.pair_id for n in index.query_top_k(v, 3)] == ["b", "a", "c"]


def test_k_larger_than_index_and_exclusion():
    rng = np.random.default_rng(1)
    index, _ = random_index(rng, 4, 8, duplicates=0)
    q = EmbeddingVector(rng.normal(size=8))
    assert len(index.query_top_k(q, 10)) == 4
    remaining = index.query_top_k(q, 10, exclude={"r0", "r2"})
    assert {n.pair_id for n in remaining} == {"r1", "r3"}


def test_query_errors():
    index, _ = random_index(np.random.default_rng(2), 3, 8, duplicates=0)
    with pytest.raises(RetrievalError):
        index.query_top_k(EmbeddingVector(np.ones(8)), 0)
    with pytest.raises(DimensionMismatch):
        index.query_top_k(EmbeddingVector(np.ones(4)), 1)


def test_empty_index_returns_nothing():
    index = build_index([])
    assert len(index) == 0
    assert index.query_top_k(EmbeddingVector(np.ones(4)), 3) == []


def test_build_index_rejects_mixed_dims():
    records = [IndexedRecord("a", EmbeddingVector(np.ones(4)).normalized(), None),
               IndexedRecord("b", EmbeddingVector(np.ones(5)).normalized(), None)]
    with pytest.raises(MixedDimensions):
        build_index(records)


def test_cosine_edge_cases():
    u = EmbeddingVector(np.array([1.0, 0.0]))
    assert cosine(u, EmbeddingVector(np.array([2.0, 0.0]))) == pytest.approx(1.0)
    assert cosine(u, EmbeddingVector(np.array([-3.0, 0.0]))) == pytest.approx(-1.0)
    with pytest.raises(ZeroVector):
        cosine(u, EmbeddingVector(np.zeros(2)))
    with pytest.raises(DimensionMismatch):
        cosine(u, EmbeddingVector(np.ones(3)))


def test_vectors_reject_non_finite_values():
    with pytest.raises(RetrievalError):
        EmbeddingVector(np.array([1.0, np.nan]))
    with pytest.raises(ZeroVector):
        EmbeddingVector(np.zeros(3)).normalized()


def test_hashing_backend_is_deterministic(hashing_backend):
    a = hashing_backend.encode(["Use sum here"])
    b = HashingEmbeddingBackend(64).encode(["Use sum here"])
    assert np.array_equal(a, b)
    assert np.linalg.norm(a[0]) == pytest.approx(1.0)
    assert hashing_backend.backend_id == "hashing-64"


class CountingBackend(HashingEmbeddingBackend):
    def __init__(self, dim=16):
        super().__init__(dim)
        self.encoded = 0

    def encode(self, texts):
        self.encoded += len(texts)
        return super().encode(texts)


def test_embed_many_uses_cache(tmp_path):
    backend = CountingBackend()
    cache = ContentCache(tmp_path / "cache")
    first = embed_many(["a b", "c d", "a b"], backend, cache)
    assert backend.encoded == 3
    second = embed_many(["a b", "c d"], backend, cache)
    assert backend.encoded == 3
    assert np.array_equal(first[0].values, second[0].values)


def test_save_and_load_round_trip(tmp_path, toy_pairs, hashing_backend):
    index = index_pairs(toy_pairs[:10], hashing_backend)
    path = index.save(tmp_path / "index.jsonl")
    loaded = load_index(path, toy_pairs)
    assert loaded.pair_ids == index.pair_ids
    assert loaded.backend_id == "hashing-64"
    q = EmbeddingVector(hashing_backend.encode([render_retrieval_text(toy_pairs[20])])[0])
    before = [(n.pair_id, n.similarity) for n in index.query_top_k(q, 3)]
    after = [(n.pair_id, n.similarity) for n in loaded.query_top_k(q, 3)]
    assert [p for p, _ in after] == [p for p, _ in before]
    assert [s for _, s in after] == pytest.approx([s for _, s in before], abs=1e-12)
    assert all(n.payload is not None for n in loaded.query_top_k(q, 3))


def test_load_index_rejects_foreign_file(tmp_path):
    path = tmp_path / "other.jsonl"
    path.write_text('{"format": "something-else", "version": 1}\n', encoding="utf-8")
    with pytest.raises(RetrievalError):
        load_index(path)


def test_retriever_leave_one_out(toy_pairs, hashing_backend):
    train = split_corpus(toy_pairs, SplitSpec(field="split")).train
    retriever = Retriever(index_pairs(train, hashing_backend), hashing_backend, k=3)
    query = train[5]
    with_self = retriever.neighbors_for(query)
    assert with_self[0].pair_id == query.pair_id
    assert with_self[0].similarity == pytest.approx(1.0)
    without = retriever.neighbors_for(query, leave_one_out=True)
    assert len(without) == 3
    assert query.pair_id not in [n.pair_id for n in without]


def test_retriever_rejects_other_backend(toy_pairs, hashing_backend):
    index = index_pairs(toy_pairs[:5], hashing_backend)
    with pytest.raises(RetrievalError):
        Retriever(index, HashingEmbeddingBackend(32))
