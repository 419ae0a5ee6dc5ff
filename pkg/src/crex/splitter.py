"""Easy/hard classification of new-task data and hard-case annotation.

Before a task is learned, the current model predicts every training
sample (candidate list = all seen relations including the new task's).
Samples the model already gets right are easy; the rest are hard and carry
the model's wrong prediction. Each hard case is then annotated with an
error reason and a correct-answer analysis from the analyst, which later
feed negative demonstrations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .analyst import AnalystClient
from .backend import ModelBackend
from .corpus import RelationLabel, Sample
from .instructions import build_simple, parse_prediction

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class HardCaseRecord:
    """A misclassified sample plus everything retrieval needs about it."""

    sample: Sample
    wrong_prediction: RelationLabel
    error_reason: str
    answer_analysis: str
    task_index: int

    def __post_init__(self) -> None:
        if self.wrong_prediction == self.sample.relation:
            raise ValueError(
                f"hard case {self.sample.id!r} has wrong_prediction equal to "
                "the gold relation"
            )


def classify_task_data(
    train: Sequence[Sample],
    seen_relations: Sequence[RelationLabel],
    backend: ModelBackend,
) -> Tuple[List[Sample], List[Tuple[Sample, RelationLabel]]]:
    """Split ``train`` into easy samples and (sample, wrong prediction)
    pairs by letting the current model predict each one.

    ``seen_relations`` is the ordered candidate list (earlier tasks first,
    then the current task's relations); it must cover every gold label.
    """
    seen = tuple(seen_relations)
    seen_set = set(seen)
    for sample in train:
        if sample.relation not in seen_set:
            raise ValueError(
                f"sample {sample.id!r} relation {sample.relation!r} missing "
                "from the candidate relation list"
            )
    easy: List[Sample] = []
    hard: List[Tuple[Sample, RelationLabel]] = []
    for sample in train:
        instruction = build_simple(sample, seen)
        response = backend.infer(instruction)
        predicted = parse_prediction(response, seen)
        if predicted == sample.relation:
            easy.append(sample)
        else:
            hard.append((sample, predicted))
    logger.info(
        "classified %d samples: %d easy, %d hard",
        len(train), len(easy), len(hard),
    )
    return easy, hard


def annotate_hard_case(
    sample: Sample,
    wrong: RelationLabel,
    analyst: AnalystClient,
    task_index: int,
) -> HardCaseRecord:
    """Attach the analyst's error reason and correct-answer analysis."""
    error_reason, answer_analysis = analyst.gen_error_analysis(sample, wrong)
    if not error_reason or not answer_analysis:
        raise ValueError(f"empty analysis for hard case {sample.id!r}")
    return HardCaseRecord(
        sample=sample,
        wrong_prediction=wrong,
        error_reason=error_reason,
        answer_analysis=answer_analysis,
        task_index=task_index,
    )
