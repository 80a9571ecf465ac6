"""
Knowledge-base retrieval: embed comment-edit triples, keep them in an exact
cosine index and return the top-k most similar historical pairs.
"""

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Protocol, Sequence

import numpy as np

from cache import ContentCache, content_digest
from corpus import CommentEditPair
from errors import BackendUnavailable, DimensionMismatch, MixedDimensions, RetrievalError, ZeroVector
from textdiff import tokenize_code

logger = logging.getLogger(__name__)

INDEX_FORMAT = "reflect-pipe-index"
INDEX_VERSION = 1
DEFAULT_K = 3


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            raise RetrievalError("embedding must have a positive dimension")
        if not np.all(np.isfinite(values)):
            raise RetrievalError("embedding contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def normalized(self) -> "EmbeddingVector":
        n = self.norm()
        if n == 0.0:
            raise ZeroVector("cannot normalize a zero vector")
        return EmbeddingVector(self.values / n)


@dataclass(frozen=True)
class IndexedRecord:
    pair_id: str
    vector: EmbeddingVector
    payload: Optional[CommentEditPair]

    @classmethod
    def from_vector(cls, pair: CommentEditPair, vector: EmbeddingVector) -> "IndexedRecord":
        return cls(pair_id=pair.pair_id, vector=vector.normalized(), payload=pair)


@dataclass(frozen=True)
class Neighbor:
    pair_id: str
    similarity: float
    payload: Optional[CommentEditPair]


class EmbeddingBackend(Protocol):
    backend_id: str
    dim: int

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        ...


class HashingEmbeddingBackend:
    """Offline encoder: signed feature hashing of code tokens, then L2 normalization."""

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise RetrievalError("hashing dimension must be positive")
        self.dim = dim
        self.backend_id = f"hashing-{dim}"

    def _encode_one(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize_code(text):
            h = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "big")
            sign = 1.0 if (h >> 63) & 1 == 0 else -1.0
            vec[h % self.dim] += sign
        n = np.linalg.norm(vec)
        return vec / n if n > 0 else vec

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        return np.vstack([self._encode_one(t) for t in texts]) if texts else np.zeros((0, self.dim))


class SentenceTransformerBackend:
    """MiniLM-style sentence encoder (optional dependency, see requirements_embeddings.txt)."""

    def __init__(self, model_name: str = "all-MiniLM-L6-v2"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as e:
            raise BackendUnavailable(
                "sentence-transformers not installed. Install with: pip install -r requirements_embeddings.txt"
            ) from e
        self.model = SentenceTransformer(model_name)
        self.dim = int(self.model.get_sentence_embedding_dimension())
        self.backend_id = f"sentence-transformers:{model_name}"

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        return np.asarray(self.model.encode(list(texts)), dtype=np.float64)


class OpenAIEmbeddingBackend:
    def __init__(self, model_name: str = "text-embedding-3-small", dim: int = 1536,
                 base_url: Optional[str] = None, api_key_env: str = "OPENAI_API_KEY"):
        import os

        from openai import OpenAI

        api_key = os.getenv(api_key_env, "").strip()
        if not api_key:
            raise BackendUnavailable(f"{api_key_env} not set in environment.")
        self.client = OpenAI(api_key=api_key, base_url=base_url or None)
        self.model_name = model_name
        self.dim = dim
        self.backend_id = f"openai:{model_name}"

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        import openai

        try:
            resp = self.client.embeddings.create(model=self.model_name, input=list(texts))
        except openai.APIError as e:
            raise BackendUnavailable(f"embedding request failed: {e}") from e
        return np.asarray([item.embedding for item in resp.data], dtype=np.float64)


def render_retrieval_text(pair: CommentEditPair) -> str:
    return (
        "Comment: " + pair.comment_text
        + "\nCode Before: " + pair.code_before
        + "\nCode After: " + pair.code_after
    )


def _embedding_key(backend: EmbeddingBackend, text: str) -> str:
    return content_digest("embed", backend.backend_id, backend.dim, text)


def embed_many(texts: Sequence[str], backend: EmbeddingBackend,
               cache: Optional[ContentCache] = None, batch_size: int = 64) -> List[EmbeddingVector]:
    """Embed texts, consulting the content-addressed cache first."""
    results: Dict[int, EmbeddingVector] = {}
    missing: List[int] = []
    for i, text in enumerate(texts):
        stored = cache.get(_embedding_key(backend, text)) if cache is not None else None
        if stored is not None:
            results[i] = EmbeddingVector(np.asarray(stored["values"], dtype=np.float64))
        else:
            missing.append(i)

    for start in range(0, len(missing), batch_size):
        chunk = missing[start:start + batch_size]
        matrix = np.asarray(backend.encode([texts[i] for i in chunk]), dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(chunk):
            raise RetrievalError(f"backend {backend.backend_id} returned shape {matrix.shape}")
        if matrix.shape[1] != backend.dim:
            raise DimensionMismatch(backend.dim, matrix.shape[1], what=f"{backend.backend_id} output")
        for i, row in zip(chunk, matrix):
            vector = EmbeddingVector(row)
            results[i] = vector
            if cache is not None:
                cache.put(_embedding_key(backend, texts[i]),
                          {"backend_id": backend.backend_id, "dim": vector.dim,
                           "values": [float(v) for v in vector.values]})
    if missing:
        logger.debug(f"Embedded {len(missing)} new texts with {backend.backend_id}")
    return [results[i] for i in range(len(texts))]


def embed(text: str, backend: EmbeddingBackend, cache: Optional[ContentCache] = None) -> EmbeddingVector:
    return embed_many([text], backend, cache)[0]


def cosine(u: EmbeddingVector, v: EmbeddingVector) -> float:
    if u.dim != v.dim:
        raise DimensionMismatch(u.dim, v.dim)
    nu, nv = u.norm(), v.norm()
    if nu == 0.0 or nv == 0.0:
        raise ZeroVector("cosine undefined for a zero vector")
    value = float(np.dot(u.values, v.values)) / (nu * nv)
    return max(-1.0, min(1.0, value))


class VectorIndex:
    """Immutable exact cosine index; insertion order breaks ties."""

    def __init__(self, records: Sequence[IndexedRecord], backend_id: str = ""):
        self.backend_id = backend_id
        self.pair_ids = [r.pair_id for r in records]
        self.payloads = [r.payload for r in records]
        if records:
            self.dim = records[0].vector.dim
            matrix = np.vstack([r.vector.values for r in records])
        else:
            self.dim = 0
            matrix = np.zeros((0, 0))
        matrix.setflags(write=False)
        self.matrix = matrix
        self.query_count = 0

    def __len__(self) -> int:
        return len(self.pair_ids)

    def query_top_k(self, q: EmbeddingVector, k: int = DEFAULT_K,
                    exclude: Optional[Iterable[str]] = None) -> List[Neighbor]:
        if k < 1:
            raise RetrievalError(f"k must be positive, got {k}")
        self.query_count += 1
        if not self.pair_ids:
            return []
        if q.dim != self.dim:
            raise DimensionMismatch(self.dim, q.dim, what="query")
        qn = q.normalized().values
        # row-wise reduction keeps equal rows bitwise-equal, so ties stay exact
        sims = np.clip(np.sum(self.matrix * qn, axis=1), -1.0, 1.0)
        order = np.argsort(-sims, kind="stable")
        excluded = set(exclude or ())
        neighbors: List[Neighbor] = []
        for idx in order:
            pair_id = self.pair_ids[idx]
            if pair_id in excluded:
                continue
            neighbors.append(Neighbor(pair_id=pair_id, similarity=float(sims[idx]),
                                      payload=self.payloads[idx]))
            if len(neighbors) == k:
                break
        return neighbors

    def save(self, path) -> Path:
        """Header line (format, version, dim, count, backend_id) then one {pair_id, vector} per line."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {"format": INDEX_FORMAT, "version": INDEX_VERSION, "dim": self.dim,
                  "count": len(self), "backend_id": self.backend_id}
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(header) + "\n")
            for pair_id, row in zip(self.pair_ids, self.matrix):
                f.write(json.dumps({"pair_id": pair_id, "vector": [float(v) for v in row]}) + "\n")
        logger.info(f"Saved index with {len(self)} records to {path}")
        return path


def build_index(records: Sequence[IndexedRecord], backend_id: str = "") -> VectorIndex:
    if not records:
        logger.warning("Building an empty index; every query will return no neighbors")
        return VectorIndex([], backend_id)
    dims = {r.vector.dim for r in records}
    if len(dims) > 1:
        raise MixedDimensions(f"records have dimensions {sorted(dims)}", dims=sorted(dims))
    for r in records:
        if abs(r.vector.norm() - 1.0) > 1e-6:
            raise RetrievalError(f"record {r.pair_id!r} is not unit-normalized")
    return VectorIndex(records, backend_id)


def index_pairs(pairs: Sequence[CommentEditPair], backend: EmbeddingBackend,
                cache: Optional[ContentCache] = None) -> VectorIndex:
    vectors = embed_many([render_retrieval_text(p) for p in pairs], backend, cache)
    records = [IndexedRecord.from_vector(p, v) for p, v in zip(pairs, vectors)]
    return build_index(records, backend.backend_id)


def load_index(path, pairs: Optional[Sequence[CommentEditPair]] = None) -> VectorIndex:
    """Load a saved index; payloads are re-attached from the corpus by pair_id."""
    by_id = {p.pair_id: p for p in pairs or ()}
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("format") != INDEX_FORMAT or header.get("version") != INDEX_VERSION:
            raise RetrievalError(f"{path} is not a version-{INDEX_VERSION} index file")
        records = []
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            vector = EmbeddingVector(np.asarray(row["vector"], dtype=np.float64))
            if vector.dim != header["dim"]:
                raise DimensionMismatch(header["dim"], vector.dim, what=f"record {row['pair_id']}")
            records.append(IndexedRecord(row["pair_id"], vector, by_id.get(row["pair_id"])))
    if len(records) != header["count"]:
        raise RetrievalError(f"{path} header declares {header['count']} records, found {len(records)}")
    return build_index(records, header.get("backend_id", ""))


class Retriever:
    """Binds an index to the backend that produced it for pair-level queries."""

    def __init__(self, index: VectorIndex, backend: EmbeddingBackend,
                 cache: Optional[ContentCache] = None, k: int = DEFAULT_K):
        if index.backend_id and index.backend_id != backend.backend_id:
            raise RetrievalError(
                f"index built with {index.backend_id}, query backend is {backend.backend_id}")
        self.index = index
        self.backend = backend
        self.cache = cache
        self.k = k

    def neighbors_for(self, pair: CommentEditPair, leave_one_out: bool = False) -> List[Neighbor]:
        q = embed(render_retrieval_text(pair), self.backend, self.cache)
        exclude = {pair.pair_id} if leave_one_out else None
        return self.index.query_top_k(q, self.k, exclude)
