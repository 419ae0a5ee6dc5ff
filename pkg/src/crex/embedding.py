"""Sentence embedders and an embedding cache.

Retrieval quality only needs *stable* geometry: identical text must map to
an identical vector in every process, and similar token bags should land
near each other. The default embedder therefore uses signed token-level
feature hashing (no learned weights, no network), while ``RemoteEmbedder``
delegates to a model service for callers that have one.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .transport import ServiceClient

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _stable_digest(token: str) -> int:
    """64-bit digest of a token, stable across processes and platforms."""
    raw = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(raw, "big")


def tokenize(text: str) -> List[str]:
    """Lowercase alphanumeric tokens; falls back to the stripped text."""
    tokens = _TOKEN_RE.findall(text.lower())
    if not tokens:
        stripped = text.strip()
        if stripped:
            return [stripped]
    return tokens


class Embedder:
    """Interface: map text to a fixed-size unit-norm float vector."""

    provider_id: str
    dim: int

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack([self.embed(t) for t in texts])


class HashingEmbedder(Embedder):
    """Signed feature hashing of token counts, L2-normalized.

    Each token is assigned a bucket and a sign from a cryptographic digest
    of the token itself, so vectors are reproducible everywhere (Python's
    built-in ``hash`` is salted per process and is never used).
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 2:
            raise ValueError(f"embedding dim must be >= 2, got {dim}")
        self.dim = dim
        self.provider_id = f"hash-{dim}"

    def _bucket(self, token: str) -> Tuple[int, float]:
        digest = _stable_digest(token)
        sign = 1.0 if digest & 1 else -1.0
        return (digest >> 1) % self.dim, sign

    def embed(self, text: str) -> np.ndarray:
        if not text or not text.strip():
            raise ValueError("cannot embed empty text")
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in tokenize(text):
            index, sign = self._bucket(token)
            vec[index] += sign
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:
            # Opposite-signed tokens can cancel exactly; fall back to a
            # single bucket derived from the full text so the vector is
            # never zero.
            index, sign = self._bucket(text)
            vec[index] = sign
            norm = 1.0
        return vec / norm


class RemoteEmbedder(Embedder):
    """Embedder that calls a model service's ``/embed`` endpoint."""

    def __init__(
        self,
        base_url: str,
        token_env: Optional[str] = None,
        client: Optional[ServiceClient] = None,
    ):
        self._client = client or ServiceClient(base_url, token_env=token_env)
        self.provider_id = f"remote:{self._client.base_url}"
        self._dim: Optional[int] = None

    @property
    def dim(self) -> int:  # type: ignore[override]
        if self._dim is None:
            self._dim = len(self.embed("dimension probe"))
        return self._dim

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            raise ValueError("embed_many requires at least one text")
        for text in texts:
            if not text or not text.strip():
                raise ValueError("cannot embed empty text")
        payload = self._client.post("/embed", {"texts": list(texts)})
        vectors = np.asarray(payload["vectors"], dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(texts):
            raise ValueError(
                f"embed service returned shape {vectors.shape} for {len(texts)} texts"
            )
        if self._dim is None:
            self._dim = int(vectors.shape[1])
        return vectors


def text_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class CachedEmbedder(Embedder):
    """Write-through cache around another embedder.

    Entries are keyed by (provider id, sha256 of text), so caches from
    different providers never collide. When ``path`` is given, hits are
    persisted as append-only JSONL and reloaded on construction.
    """

    def __init__(self, inner: Embedder, path: Optional[Path] = None):
        self.inner = inner
        self.provider_id = inner.provider_id
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._store: Dict[str, np.ndarray] = {}
        if self.path is not None and self.path.exists():
            self._load()

    @property
    def dim(self) -> int:  # type: ignore[override]
        return self.inner.dim

    def __len__(self) -> int:
        return len(self._store)

    def _load(self) -> None:
        assert self.path is not None
        loaded = 0
        with self.path.open("r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if not line:
                    continue
                record = json.loads(line)
                if record.get("provider") != self.provider_id:
                    continue
                self._store[record["key"]] = np.asarray(
                    record["vector"], dtype=np.float64
                )
                loaded += 1
        logger.info("loaded %d cached embeddings from %s", loaded, self.path)

    def _persist(self, key: str, vector: np.ndarray) -> None:
        assert self.path is not None
        record = {
            "provider": self.provider_id,
            "key": key,
            "vector": [float(x) for x in vector],
        }
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(record, sort_keys=True) + "\n")

    def embed(self, text: str) -> np.ndarray:
        key = text_key(text)
        with self._lock:
            hit = self._store.get(key)
        if hit is not None:
            return hit.copy()
        vector = self.inner.embed(text)
        with self._lock:
            if key not in self._store:
                self._store[key] = vector.copy()
                if self.path is not None:
                    self._persist(key, vector)
        return vector

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, self.dim), dtype=np.float64)
        keys = [text_key(t) for t in texts]
        with self._lock:
            missing = [
                (i, t) for i, (t, k) in enumerate(zip(texts, keys))
                if k not in self._store
            ]
        if missing:
            fresh = self.inner.embed_many([t for _, t in missing])
            with self._lock:
                for (index, _), vector in zip(missing, fresh):
                    key = keys[index]
                    if key not in self._store:
                        self._store[key] = np.asarray(vector, dtype=np.float64)
                        if self.path is not None:
                            self._persist(key, self._store[key])
        with self._lock:
            return np.stack([self._store[k].copy() for k in keys])
