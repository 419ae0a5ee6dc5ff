"""Test doubles shared across the suite."""

from __future__ import annotations

import json
from typing import Callable, Dict, Iterable, List, Optional, Sequence

from crex.backend import ModelBackend, TrainBatchItem, TrainSummary
from crex.corpus import Entity, Sample
from crex.instructions import InstructionQuery, parse_instruction_query


def make_sample(
    id: str,
    sentence: str,
    relation: str,
    head: str = "alpha",
    tail: str = "omega",
) -> Sample:
    return Sample(
        id=id,
        sentence=sentence,
        head=Entity(head),
        tail=Entity(tail),
        relation=relation,
    )


class ScriptedBackend(ModelBackend):
    """Backend whose answers come from a function of the parsed query.

    Every call is recorded so tests can assert on the exact traffic.
    Checkpoints return incrementing ids without capturing state (the
    script itself is stateless), which satisfies orchestration code that
    only needs the calls to succeed.
    """

    def __init__(
        self,
        answer_fn: Callable[[InstructionQuery], str],
        identity: str = "scripted",
    ):
        self.answer_fn = answer_fn
        self.identity = identity
        self.infer_queries: List[InstructionQuery] = []
        self.train_calls: List[dict] = []
        self._checkpoint_count = 0

    def infer(self, instruction) -> str:
        query = parse_instruction_query(instruction.text)
        self.infer_queries.append(query)
        return json.dumps({"relation": self.answer_fn(query)})

    def train(
        self,
        batch: Sequence[TrainBatchItem],
        epochs: int,
        learning_rate: float,
        batch_size: int,
        seed: int,
    ) -> TrainSummary:
        self.train_calls.append(
            {
                "targets": [item.target for item in batch],
                "hints": [item.weight_hint for item in batch],
                "kinds": [item.instruction.kind for item in batch],
                "epochs": epochs,
                "learning_rate": learning_rate,
                "batch_size": batch_size,
                "seed": seed,
            }
        )
        return TrainSummary(items_seen=epochs * len(batch), loss=0.0)

    def checkpoint(self) -> str:
        self._checkpoint_count += 1
        return f"scripted-{self._checkpoint_count:04d}"

    def restore(self, checkpoint_id: str) -> None:
        pass


def oracle_backend(samples: Iterable[Sample]) -> ScriptedBackend:
    """Backend that always answers the gold relation (keyed by sentence)."""
    gold: Dict[str, str] = {s.sentence: s.relation for s in samples}
    return ScriptedBackend(lambda q: gold[q.sentence], identity="oracle")


def adversarial_backend(
    samples: Iterable[Sample],
    wrong_for: Optional[Callable[[Sample], bool]] = None,
) -> ScriptedBackend:
    """Backend that answers a wrong candidate for selected samples.

    ``wrong_for`` picks which samples get a wrong answer (default: all).
    The wrong answer is the first candidate that differs from the gold.
    """
    by_sentence: Dict[str, Sample] = {s.sentence: s for s in samples}

    def answer(query: InstructionQuery) -> str:
        sample = by_sentence[query.sentence]
        if wrong_for is not None and not wrong_for(sample):
            return sample.relation
        for candidate in query.relations:
            if candidate != sample.relation:
                return candidate
        raise AssertionError("no wrong candidate available")

    return ScriptedBackend(answer, identity="adversarial")


def first_candidate_backend() -> ScriptedBackend:
    """Backend that always answers the first listed candidate."""
    return ScriptedBackend(lambda q: q.relations[0], identity="first-candidate")
