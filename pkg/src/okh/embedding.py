"""Hyperedge text composition, embedding providers, and the vector cache.

Two providers share one contract: a deterministic local feature-hashing
embedder for offline and test use, and an HTTP client for hosted embedding
endpoints. Every vector is unit-normalized and then quantized through f32
so that freshly computed and cache-loaded vectors are bit-identical.
"""

from __future__ import annotations

import os
import struct
import threading
import time
from typing import Iterable, Mapping, Sequence

import numpy as np
import requests

from okh.errors import DimensionMismatch, ProviderError, ZeroNorm
from okh.hashutil import content_key, fnv1a64
from okh.hypergraph import Entity, Hyperedge, KnowledgeHypergraph
from okh.relations import EntityType

API_KEY_ENV = "OKH_EMBED_API_KEY"
CACHE_MAGIC = b"OKHE"
CACHE_VERSION = 1
DEFAULT_LOCAL_DIM = 256


def compose_text(edge: Hyperedge, entities: Mapping[str, Entity]) -> str:
    """Render a hyperedge as the flat text that gets embedded.

    Layout: relation, evidence, entities as "name [type]" sorted by entity
    id, and attributes as "key=value" sorted by key, joined by " | ". The
    attribute segment is present but empty when the edge has no attributes.
    """
    parts = []
    for entity_id in sorted(edge.entity_ids):
        entity = entities.get(entity_id)
        if entity is None:
            parts.append(f"{entity_id} [{EntityType.OTHER.value}]")
        else:
            parts.append(f"{entity.name} [{entity.entity_type.value}]")
    attr_part = "; ".join(f"{key}={value}" for key, value in sorted(edge.attributes.items()))
    return f"{edge.relation} | {edge.evidence} | " + "; ".join(parts) + f" | {attr_part}"


def _quantize(vector: np.ndarray) -> np.ndarray:
    return np.asarray(vector, dtype=np.float32).astype(np.float64)


def _unit(vector: np.ndarray, dim: int) -> np.ndarray:
    norm = float(np.linalg.norm(vector))
    if norm == 0.0:
        basis = np.zeros(dim, dtype=np.float64)
        basis[0] = 1.0
        return basis
    return vector / norm


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatch(f"cosine over shapes {u.shape} and {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroNorm("cosine is undefined for zero vectors")
    return float(np.dot(u, v) / (nu * nv))


class LocalHashingEmbedder:
    """Deterministic bag-of-tokens feature hashing into a fixed dimension.

    Each whitespace token hashes to one bucket with a sign bit; the
    accumulated vector is L2-normalized. Empty or fully cancelling text maps
    to the first basis vector so downstream math never sees a zero vector.
    """

    def __init__(self, dim: int = DEFAULT_LOCAL_DIM):
        if dim < 8:
            raise ValueError("local embedder dimension must be at least 8")
        self.dim = dim

    def embed_one(self, text: str) -> np.ndarray:
        accum = np.zeros(self.dim, dtype=np.float64)
        for token in text.split():
            digest = fnv1a64(token.encode("utf-8"))
            sign = 1.0 if digest >> 63 == 0 else -1.0
            accum[digest % self.dim] += sign
        return _quantize(_unit(accum, self.dim))

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack([self.embed_one(text) for text in texts])


def post_json_with_retries(
    url: str,
    payload: dict,
    api_key: str | None,
    max_attempts: int = 3,
    backoff: float = 0.5,
    timeout: float = 30.0,
) -> dict:
    """POST JSON with bearer auth, exponential backoff, and bounded retries."""
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    last_status: int | None = None
    last_body = ""
    for attempt in range(max_attempts):
        try:
            response = requests.post(url, json=payload, headers=headers, timeout=timeout)
            last_status = response.status_code
            last_body = response.text[:200]
            if response.status_code == 200:
                return response.json()
            if response.status_code not in (429,) and response.status_code < 500:
                break
        except requests.RequestException as exc:
            last_status = None
            last_body = str(exc)[:200]
        if attempt + 1 < max_attempts:
            time.sleep(backoff * 2**attempt)
    raise ProviderError(last_status, last_body)


class RemoteEmbeddingClient:
    """Client for a hosted embedding endpoint speaking the common JSON shape."""

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        dim: int | None = None,
        api_key: str | None = None,
        batch_size: int = 64,
        max_attempts: int = 3,
        backoff: float = 0.5,
        timeout: float = 30.0,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model_name = model_name
        self.dim = dim
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV)
        self.batch_size = batch_size
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout

    def _embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        body = post_json_with_retries(
            f"{self.endpoint}/embeddings",
            {"model": self.model_name, "input": list(texts)},
            self.api_key,
            self.max_attempts,
            self.backoff,
            self.timeout,
        )
        data = body.get("data")
        if not isinstance(data, list) or len(data) != len(texts):
            raise ProviderError(200, f"expected {len(texts)} embeddings, got {data!r:.200}")
        rows: list[np.ndarray | None] = [None] * len(texts)
        for item in data:
            rows[int(item["index"])] = np.asarray(item["embedding"], dtype=np.float64)
        vectors = []
        for row in rows:
            if row is None:
                raise ProviderError(200, "response is missing an embedding index")
            if self.dim is None:
                self.dim = int(row.shape[0])
            if row.shape[0] != self.dim:
                raise DimensionMismatch(
                    f"provider returned dimension {row.shape[0]}, expected {self.dim}"
                )
            vectors.append(_quantize(_unit(row, self.dim)))
        return vectors

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        vectors: list[np.ndarray] = []
        for start in range(0, len(texts), self.batch_size):
            vectors.extend(self._embed_batch(texts[start : start + self.batch_size]))
        if not vectors:
            return np.zeros((0, self.dim or 0), dtype=np.float64)
        return np.stack(vectors)


class EmbeddingCache:
    """Binary on-disk map from text digests to f32 vectors.

    File layout: magic "OKHE", u32 version, u32 dimension, then records of
    a 16-byte digest followed by dimension little-endian f32 values. Reads
    are lock-free once loaded; writes are serialized.
    """

    def __init__(self, path: str, dim: int):
        self.path = path
        self.dim = dim
        self._records: dict[bytes, np.ndarray] = {}
        self._lock = threading.Lock()
        self._load()

    def _load(self) -> None:
        try:
            with open(self.path, "rb") as handle:
                blob = handle.read()
        except FileNotFoundError:
            return
        header = struct.calcsize("<4sII")
        if len(blob) < header:
            return
        magic, version, dim = struct.unpack_from("<4sII", blob)
        if magic != CACHE_MAGIC or version != CACHE_VERSION or dim != self.dim:
            # Incompatible cache files are ignored and rebuilt on save.
            return
        record = 16 + 4 * dim
        offset = header
        while offset + record <= len(blob):
            key = blob[offset : offset + 16]
            vector = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset + 16)
            self._records[key] = vector.astype(np.float64)
            offset += record

    def __len__(self) -> int:
        return len(self._records)

    def lookup(self, text: str) -> np.ndarray | None:
        vector = self._records.get(content_key(text))
        return None if vector is None else vector.copy()

    def store(self, text: str, vector: np.ndarray) -> None:
        if vector.shape != (self.dim,):
            raise DimensionMismatch(f"cache holds {self.dim}-d vectors, got {vector.shape}")
        with self._lock:
            self._records[content_key(text)] = np.asarray(vector, dtype=np.float64)

    def save(self) -> None:
        with self._lock:
            blob = bytearray(struct.pack("<4sII", CACHE_MAGIC, CACHE_VERSION, self.dim))
            for key in sorted(self._records):
                blob += key
                blob += self._records[key].astype("<f4").tobytes()
            tmp = self.path + ".tmp"
            with open(tmp, "wb") as handle:
                handle.write(bytes(blob))
            os.replace(tmp, self.path)


class EmbeddingStore:
    """Edge embeddings for one hypergraph plus query embedding support."""

    def __init__(
        self,
        ids: list[str],
        matrix: np.ndarray,
        embedder,
        cache: EmbeddingCache | None = None,
    ):
        self.ids = ids
        self.matrix = matrix
        self.row_of = {edge_id: row for row, edge_id in enumerate(ids)}
        self.embedder = embedder
        self.cache = cache

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    @classmethod
    def build(
        cls,
        hypergraph: KnowledgeHypergraph,
        embedder,
        cache: EmbeddingCache | None = None,
    ) -> "EmbeddingStore":
        ids = sorted(hypergraph.hyperedges)
        texts = [
            compose_text(hypergraph.hyperedges[edge_id], hypergraph.entities)
            for edge_id in ids
        ]
        rows: list[np.ndarray | None] = [None] * len(ids)
        misses: list[int] = []
        if cache is not None:
            for i, text in enumerate(texts):
                rows[i] = cache.lookup(text)
                if rows[i] is None:
                    misses.append(i)
        else:
            misses = list(range(len(ids)))
        if misses:
            fresh = embedder.embed([texts[i] for i in misses])
            for slot, i in enumerate(misses):
                rows[i] = fresh[slot]
                if cache is not None:
                    cache.store(texts[i], fresh[slot])
        dim = getattr(embedder, "dim", None) or (rows[0].shape[0] if rows else 0)
        matrix = (
            np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float64)
        )
        return cls(ids, matrix, embedder, cache)

    def vector(self, edge_id: str) -> np.ndarray:
        return self.matrix[self.row_of[edge_id]]

    def embed_query(self, text: str) -> np.ndarray:
        if self.cache is not None:
            hit = self.cache.lookup(text)
            if hit is not None:
                return hit
        vector = self.embedder.embed([text])[0]
        if self.cache is not None:
            self.cache.store(text, vector)
        return vector

    def relevance(self, query_vector: np.ndarray) -> np.ndarray:
        """Cosine of every edge against a unit query vector (plain dot)."""
        query_vector = np.asarray(query_vector, dtype=np.float64)
        if query_vector.shape != (self.dim,):
            raise DimensionMismatch(
                f"query vector has shape {query_vector.shape}, store is {self.dim}-d"
            )
        return self.matrix @ query_vector
