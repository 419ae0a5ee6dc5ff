"""Dataset loading, per-relation capping, and task-sequence construction.

Datasets are JSONL files, one record per line:

    {"id": ..., "sentence": ... (or "tokens": [...]),
     "head": {"text": ..., "start": ..., "end": ...},
     "tail": {...}, "relation": ...}

Both tacred-like and fewrel-like inputs use this schema; the format flag
only controls tacred-specific handling (dropping no_relation records).
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .seeding import derive_rng

RelationLabel = str

NO_RELATION = "no relation"

# Wrong-prediction placeholder for model responses that could not be parsed.
UNPARSEABLE = "unparseable"

_SEPARATORS = re.compile(r"[_:/]+")
_LEADING = {"per": "person", "org": "organization"}
# TACRED compounds that the canonical names spell out as separate words.
_COMPOUNDS = {
    "stateorprovince": "state or province",
    "stateorprovinces": "state or provinces",
}


class DatasetError(ValueError):
    """Raised when a dataset file fails schema validation."""


def canonicalize_relation(name: str) -> RelationLabel:
    """Canonical relation name: lowercase, separators to spaces, TACRED
    abbreviations expanded. Idempotent."""
    text = _SEPARATORS.sub(" ", name.strip().lower())
    tokens = text.split()
    if tokens and tokens[0] in _LEADING:
        tokens[0] = _LEADING[tokens[0]]
    out: list[str] = []
    for tok in tokens:
        out.extend(_COMPOUNDS.get(tok, tok).split())
    return " ".join(out)


def expand_abbreviations(text: str) -> str:
    """Loose variant of canonicalization for free-text search.

    Lowercases, maps separators to spaces, and expands the relation
    abbreviations on *every* token (not just the leading one), so a raw
    mention like "per:city_of_birth" inside a sentence becomes comparable
    to the canonical "person city of birth".
    """
    tokens = _SEPARATORS.sub(" ", text.lower()).split()
    out: list[str] = []
    for tok in tokens:
        tok = _LEADING.get(tok, tok)
        out.extend(_COMPOUNDS.get(tok, tok).split())
    return " ".join(out)


@dataclass(frozen=True)
class Entity:
    text: str
    start: Optional[int] = None
    end: Optional[int] = None

    def to_record(self) -> dict:
        rec: dict = {"text": self.text}
        if self.start is not None:
            rec["start"] = self.start
        if self.end is not None:
            rec["end"] = self.end
        return rec


@dataclass(frozen=True)
class Sample:
    """One labeled relation-extraction instance."""

    id: str
    sentence: str
    head: Entity
    tail: Entity
    relation: RelationLabel

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "sentence": self.sentence,
            "head": self.head.to_record(),
            "tail": self.tail.to_record(),
            "relation": self.relation,
        }


@dataclass
class TaskSpec:
    """One task of a continual sequence: its relation subset and data."""

    index: int  # 1-based
    relations: tuple[RelationLabel, ...]
    train: list[Sample] = field(default_factory=list)
    test: list[Sample] = field(default_factory=list)


@dataclass
class TaskSequence:
    seed: int
    tasks: list[TaskSpec]

    @property
    def relations(self) -> tuple[RelationLabel, ...]:
        out: list[RelationLabel] = []
        for task in self.tasks:
            out.extend(task.relations)
        return tuple(out)


def _parse_entity(raw: object, record_index: int, role: str) -> Entity:
    if not isinstance(raw, dict) or not str(raw.get("text", "") or "").strip():
        raise DatasetError(f"record {record_index}: missing {role} entity")
    start = raw.get("start")
    end = raw.get("end")
    if (start is None) != (end is None):
        raise DatasetError(f"record {record_index}: {role} has partial offsets")
    return Entity(text=str(raw["text"]), start=start, end=end)


def _parse_record(raw: dict, record_index: int) -> Sample:
    sample_id = str(raw.get("id", "") or "").strip()
    if not sample_id:
        raise DatasetError(f"record {record_index}: missing id")
    if "sentence" in raw:
        sentence = str(raw["sentence"])
    elif "tokens" in raw:
        tokens = raw["tokens"]
        if not isinstance(tokens, list) or not tokens:
            raise DatasetError(f"record {record_index}: empty tokens")
        sentence = " ".join(str(t) for t in tokens)
    else:
        raise DatasetError(f"record {record_index}: missing sentence/tokens")
    if not sentence.strip():
        raise DatasetError(f"record {record_index}: empty sentence")
    head = _parse_entity(raw.get("head"), record_index, "head")
    tail = _parse_entity(raw.get("tail"), record_index, "tail")
    for role, ent in (("head", head), ("tail", tail)):
        if ent.start is not None and ent.text not in sentence:
            raise DatasetError(
                f"record {record_index}: {role} text not found in sentence"
            )
    relation = canonicalize_relation(str(raw.get("relation", "") or ""))
    if not relation:
        raise DatasetError(f"record {record_index}: missing relation")
    return Sample(id=sample_id, sentence=sentence, head=head, tail=tail, relation=relation)


def load_dataset(path: str | Path, format: str = "tacred-like") -> list[Sample]:
    """Load and validate a JSONL dataset.

    tacred-like input drops no_relation records; fewrel-like keeps all.
    Any schema violation rejects the whole file.
    """
    fmt = format.replace("_", "-").lower()
    if fmt not in ("tacred-like", "fewrel-like"):
        raise DatasetError(f"unknown dataset format: {format!r}")
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise DatasetError(f"line {lineno}: record is not an object")
            sample = _parse_record(raw, lineno)
            if sample.id in seen_ids:
                raise DatasetError(f"line {lineno}: duplicate id {sample.id!r}")
            seen_ids.add(sample.id)
            if fmt == "tacred-like" and sample.relation == NO_RELATION:
                continue
            samples.append(sample)
    return samples


def serialize_samples(samples: Iterable[Sample], path: str | Path) -> None:
    """Write samples back out in the normalized JSONL schema."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample in samples:
            fh.write(json.dumps(sample.to_record(), ensure_ascii=False) + "\n")


def _selection_rank(seed: int, relation: str, sample_id: str) -> str:
    key = f"{seed}\x1f{relation}\x1f{sample_id}".encode("utf-8")
    return hashlib.sha256(key).hexdigest()


def cap_per_relation(
    samples: Sequence[Sample], train_cap: int, test_cap: int, seed: int
) -> tuple[list[Sample], list[Sample]]:
    """Split samples into per-relation train/test lists under the caps.

    Selection is by a per-sample pseudo-random rank keyed on
    (seed, relation, id), so it is deterministic, independent of input
    order, and a projection: re-applying to its own output is a no-op.
    When a relation has fewer samples than the caps, roughly a fifth
    (at most test_cap) is held out for test.
    """
    if train_cap <= 0 or test_cap <= 0:
        raise ValueError("caps must be positive")
    if not samples:
        raise ValueError("no samples to split")
    by_relation: dict[str, list[Sample]] = {}
    for sample in samples:
        by_relation.setdefault(sample.relation, []).append(sample)
    train: list[Sample] = []
    test: list[Sample] = []
    for relation in sorted(by_relation):
        pool = sorted(
            by_relation[relation],
            key=lambda s: (_selection_rank(seed, relation, s.id), s.id),
        )
        n = len(pool)
        n_test = 0 if n == 1 else min(test_cap, max(1, n // 5))
        n_train = min(train_cap, n - n_test)
        test.extend(pool[:n_test])
        train.extend(pool[n_test : n_test + n_train])
    return train, test


def build_task_sequences(
    relations: Iterable[RelationLabel],
    num_tasks: int,
    num_sequences: int,
    seed: int,
    *,
    train_by_relation: Optional[dict[str, list[Sample]]] = None,
    test_by_relation: Optional[dict[str, list[Sample]]] = None,
) -> list[TaskSequence]:
    """Randomly partition the relation set into num_tasks disjoint subsets,
    num_sequences times. When the count does not divide evenly the earliest
    tasks take the remainder. Deterministic per (seed, sequence index)."""
    relation_list = sorted({canonicalize_relation(r) for r in relations})
    if not relation_list:
        raise ValueError("empty relation set")
    if num_tasks < 1 or num_tasks > len(relation_list):
        raise ValueError(
            f"num_tasks={num_tasks} invalid for {len(relation_list)} relations"
        )
    if num_sequences < 1:
        raise ValueError("num_sequences must be >= 1")
    train_by_relation = train_by_relation or {}
    test_by_relation = test_by_relation or {}
    base, remainder = divmod(len(relation_list), num_tasks)
    sequences: list[TaskSequence] = []
    for i in range(num_sequences):
        rng = derive_rng(seed, "task-partition", i)
        shuffled = list(relation_list)
        rng.shuffle(shuffled)
        tasks: list[TaskSpec] = []
        cursor = 0
        for k in range(num_tasks):
            size = base + (1 if k < remainder else 0)
            chunk = tuple(sorted(shuffled[cursor : cursor + size]))
            cursor += size
            task = TaskSpec(index=k + 1, relations=chunk)
            for relation in chunk:
                task.train.extend(train_by_relation.get(relation, []))
                task.test.extend(test_by_relation.get(relation, []))
            tasks.append(task)
        sequences.append(TaskSequence(seed=rng.getrandbits(32), tasks=tasks))
    return sequences


def group_by_relation(samples: Iterable[Sample]) -> dict[str, list[Sample]]:
    grouped: dict[str, list[Sample]] = {}
    for sample in samples:
        grouped.setdefault(sample.relation, []).append(sample)
    return grouped


def sequence_manifest(sequence: TaskSequence) -> dict:
    """JSON-ready manifest of a task sequence, sufficient for exact replay."""
    return {
        "seed": sequence.seed,
        "tasks": [
            {
                "index": task.index,
                "relations": list(task.relations),
                "train_ids": [s.id for s in task.train],
                "test_ids": [s.id for s in task.test],
            }
            for task in sequence.tasks
        ],
    }


def sequence_from_manifest(manifest: dict, samples: Iterable[Sample]) -> TaskSequence:
    """Reconstruct a task sequence from its manifest and the source samples."""
    by_id = {s.id: s for s in samples}
    tasks = []
    for entry in manifest["tasks"]:
        try:
            train = [by_id[i] for i in entry["train_ids"]]
            test = [by_id[i] for i in entry["test_ids"]]
        except KeyError as exc:
            raise DatasetError(f"manifest references unknown sample id {exc}") from exc
        tasks.append(
            TaskSpec(
                index=entry["index"],
                relations=tuple(entry["relations"]),
                train=train,
                test=test,
            )
        )
    return TaskSequence(seed=manifest["seed"], tasks=tasks)
