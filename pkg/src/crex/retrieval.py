"""Relation prototypes and demonstration retrieval.

Each relation gets a prototype vector (the mean embedding of its training
sentences, frozen at the task where it was learned). When a new relation
produces hard cases, the most similar previously learned relation is found
by cosine over prototypes; positive demonstrations come from that
relation's easy memory (queried by the hard sentence) and negative
demonstrations from the union of earlier hard memory (queried by the error
reason). All similarity is an exact full scan — pools are tiny — which is
what lets tests check rankings against brute force.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .corpus import RelationLabel, Sample
from .embedding import Embedder

if TYPE_CHECKING:
    from .splitter import HardCaseRecord


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity; rejects zero vectors instead of guessing."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    norm_a = float(np.linalg.norm(a))
    norm_b = float(np.linalg.norm(b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.dot(a, b) / (norm_a * norm_b))


@dataclass(frozen=True)
class RelationPrototype:
    relation: RelationLabel
    vector: np.ndarray
    support_count: int


def relation_prototype(
    relation: RelationLabel, samples: Sequence[Sample], embedder: Embedder
) -> RelationPrototype:
    """Mean sentence embedding over the relation's training data."""
    if not samples:
        raise ValueError(f"no samples to build a prototype for {relation!r}")
    for sample in samples:
        if sample.relation != relation:
            raise ValueError(
                f"sample {sample.id!r} has relation {sample.relation!r}, "
                f"expected {relation!r}"
            )
    vectors = embedder.embed_many([s.sentence for s in samples])
    return RelationPrototype(
        relation=relation,
        vector=vectors.mean(axis=0),
        support_count=len(samples),
    )


def most_similar_relation(
    relation: RelationLabel,
    previous: Iterable[RelationLabel],
    prototypes: Dict[RelationLabel, RelationPrototype],
) -> RelationLabel:
    """Previously learned relation whose prototype is nearest by cosine.

    Ties break by relation-name order so the answer is reproducible.
    """
    candidates = sorted(previous)
    if not candidates:
        raise ValueError("no previously learned relations to compare against")
    if relation in candidates:
        raise ValueError(f"{relation!r} is itself a previously learned relation")
    query = prototypes[relation].vector
    best: Tuple[float, str] | None = None
    for name in candidates:
        score = cosine(query, prototypes[name].vector)
        if best is None or score > best[0]:
            best = (score, name)
    assert best is not None
    return best[1]


def _rank(
    query_vector: np.ndarray,
    keyed_vectors: Sequence[Tuple[str, np.ndarray]],
    k: int,
) -> List[int]:
    """Indices of the top-k entries by cosine, ties broken by key."""
    scored = [
        (-cosine(query_vector, vec), key, index)
        for index, (key, vec) in enumerate(keyed_vectors)
    ]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [index for _, _, index in scored[:k]]


def retrieve_positive(
    hard: Sample,
    easy_memory: Sequence[Sample],
    k_p: int,
    embedder: Embedder,
) -> List[Sample]:
    """Top-k_p easy-memory samples most similar to the hard sentence."""
    if k_p < 1:
        raise ValueError(f"k_p must be >= 1, got {k_p}")
    if not easy_memory:
        return []
    query = embedder.embed(hard.sentence)
    keyed = [
        (s.id, embedder.embed(s.sentence)) for s in easy_memory
    ]
    return [easy_memory[i] for i in _rank(query, keyed, k_p)]


def retrieve_negative(
    record: "HardCaseRecord",
    hard_memory: Sequence["HardCaseRecord"],
    k_n: int,
    embedder: Embedder,
) -> List["HardCaseRecord"]:
    """Top-k_n earlier hard cases with the most similar error reasons."""
    if k_n < 1:
        raise ValueError(f"k_n must be >= 1, got {k_n}")
    if not record.error_reason:
        raise ValueError("hard case has no error reason to query with")
    if not hard_memory:
        return []
    query = embedder.embed(record.error_reason)
    keyed = [
        (r.sample.id, embedder.embed(r.error_reason)) for r in hard_memory
    ]
    return [hard_memory[i] for i in _rank(query, keyed, k_n)]
