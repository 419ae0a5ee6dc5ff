"""Two-part per-relation memory with k-means exemplar selection.

Every relation keeps two bounded lists chosen at the task where the
relation was learned: up to ``m`` easy samples and up to ``m`` hard cases.
Selection clusters the candidate embeddings into ``m`` groups and keeps the
item nearest each cluster center, which preserves intra-relation diversity
better than uniform sampling. Once stored, a relation's memory never
changes; unions over stored relations feed replay training and negative
demonstration retrieval.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Sequence, Tuple, TypeVar, Union

import numpy as np

from .corpus import RelationLabel, Sample
from .embedding import Embedder

if TYPE_CHECKING:
    from .splitter import HardCaseRecord

logger = logging.getLogger(__name__)

DEFAULT_MEMORY_SIZE = 5

_MAX_ITERATIONS = 100
_SHIFT_TOLERANCE = 1e-6

ItemT = TypeVar("ItemT")


def item_text(item) -> str:
    """Clustering text of a memory candidate (sample or hard case)."""
    sentence = getattr(item, "sentence", None)
    if sentence is not None:
        return sentence
    return item.sample.sentence


def item_id(item) -> str:
    identifier = getattr(item, "id", None)
    if identifier is not None:
        return identifier
    return item.sample.id


def _kmeans_pp_init(
    points: np.ndarray, k: int, rng: random.Random
) -> np.ndarray:
    """Seeded k-means++ initialization (D^2-weighted seeding)."""
    n = points.shape[0]
    first = rng.randrange(n)
    centroids = [points[first]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            # All remaining points coincide with a centroid; any choice works.
            index = rng.randrange(n)
        else:
            index = rng.choices(range(n), weights=d2.tolist(), k=1)[0]
        centroids.append(points[index])
        d2 = np.minimum(d2, ((points - centroids[-1]) ** 2).sum(axis=1))
    return np.stack(centroids)


def _lloyd(points: np.ndarray, k: int, rng: random.Random) -> np.ndarray:
    """Lloyd iterations; returns final centroids. Empty clusters are
    re-seeded to the point farthest from its assigned centroid."""
    centroids = _kmeans_pp_init(points, k, rng)
    n = points.shape[0]
    for _ in range(_MAX_ITERATIONS):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignment = d2.argmin(axis=1)
        own_distance = d2[np.arange(n), assignment].copy()
        new_centroids = centroids.copy()
        for j in range(k):
            members = np.nonzero(assignment == j)[0]
            if members.size:
                new_centroids[j] = points[members].mean(axis=0)
            else:
                farthest = int(own_distance.argmax())
                new_centroids[j] = points[farthest]
                own_distance[farthest] = -1.0  # each reseed takes a new point
        shift = float(np.abs(new_centroids - centroids).max())
        centroids = new_centroids
        if shift < _SHIFT_TOLERANCE:
            break
    return centroids


def select_memory_kmeans(
    items: Sequence[ItemT], m: int, embedder: Embedder, seed: int
) -> List[ItemT]:
    """Pick up to ``m`` diverse representatives of ``items``.

    With ``m`` or fewer candidates everything is kept. Otherwise k-means
    with k = m runs over the item embeddings and each cluster contributes
    the item nearest its center (ties by smallest id; an item already taken
    by another cluster yields to the next nearest unchosen one).
    """
    if m < 1:
        raise ValueError(f"memory size must be >= 1, got {m}")
    items = list(items)
    if len(items) <= m:
        return items
    points = embedder.embed_many([item_text(i) for i in items])
    centroids = _lloyd(points, m, random.Random(seed))
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignment = d2.argmin(axis=1)

    taken: set[int] = set()
    for j in range(m):
        members = [i for i in range(len(items)) if assignment[i] == j]
        ordering = sorted(members, key=lambda i: (d2[i, j], item_id(items[i])))
        pick = next((i for i in ordering if i not in taken), None)
        if pick is None:
            # Cluster's members were all claimed (possible after
            # re-seeding); take the nearest unchosen point overall.
            everyone = sorted(
                (i for i in range(len(items)) if i not in taken),
                key=lambda i: (d2[i, j], item_id(items[i])),
            )
            pick = everyone[0]
        taken.add(pick)
    return [item for i, item in enumerate(items) if i in taken]


@dataclass
class DualMemoryStore:
    """Per-relation easy/hard memory, filled once per relation."""

    m: int = DEFAULT_MEMORY_SIZE
    easy: Dict[RelationLabel, List[Sample]] = field(default_factory=dict)
    hard: Dict[RelationLabel, List["HardCaseRecord"]] = field(default_factory=dict)
    task_of: Dict[RelationLabel, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError(f"memory size must be >= 1, got {self.m}")

    @property
    def relations(self) -> List[RelationLabel]:
        return sorted(self.task_of, key=lambda r: (self.task_of[r], r))

    def add_relation(
        self,
        relation: RelationLabel,
        task_index: int,
        easy_selection: Sequence[Sample],
        hard_selection: Sequence["HardCaseRecord"],
    ) -> None:
        """Store a relation's memory; a relation is stored exactly once."""
        if relation in self.task_of:
            raise ValueError(f"memory for {relation!r} already selected")
        if len(easy_selection) > self.m or len(hard_selection) > self.m:
            raise ValueError(
                f"selection for {relation!r} exceeds memory size {self.m}"
            )
        easy_ids = [s.id for s in easy_selection]
        hard_ids = [h.sample.id for h in hard_selection]
        if len(set(easy_ids)) != len(easy_ids) or len(set(hard_ids)) != len(hard_ids):
            raise ValueError(f"duplicate ids in memory selection for {relation!r}")
        self.easy[relation] = list(easy_selection)
        self.hard[relation] = list(hard_selection)
        self.task_of[relation] = task_index

    def easy_of(self, relation: RelationLabel) -> List[Sample]:
        return list(self.easy.get(relation, []))

    def easy_union(self) -> List[Sample]:
        out: List[Sample] = []
        for relation in self.relations:
            out.extend(sorted(self.easy[relation], key=lambda s: s.id))
        return out

    def hard_union(self, before_task: int | None = None) -> List["HardCaseRecord"]:
        """Hard memory over stored relations, oldest task first.

        ``before_task`` keeps only relations learned strictly earlier,
        which is how negative demonstrations exclude the current task.
        """
        out: List["HardCaseRecord"] = []
        for relation in self.relations:
            if before_task is not None and self.task_of[relation] >= before_task:
                continue
            out.extend(sorted(self.hard[relation], key=lambda h: h.sample.id))
        return out

    def all_memory(self) -> Tuple[List[Sample], List["HardCaseRecord"]]:
        return self.easy_union(), self.hard_union()

    def counts(self) -> Dict[str, int]:
        return {
            "relations": len(self.task_of),
            "easy": sum(len(v) for v in self.easy.values()),
            "hard": sum(len(v) for v in self.hard.values()),
        }
