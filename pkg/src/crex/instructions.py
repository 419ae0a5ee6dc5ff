"""Prompt construction and response parsing for relation extraction.

Two prompt forms exist. The simple form states the task and asks for a
prediction over the seen-relation list. The contrastive form additionally
shows positive demonstrations from the most similar previously learned
relation (with a one-sentence statement of the difference between the two
relations) and negative demonstrations of earlier mistakes (with error
reasons and correct-answer analyses).

Rendering is deterministic and byte-stable: golden-file tests depend on
every space and bracket here, so formatting changes are breaking changes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, List, Optional, Sequence, Tuple

from .corpus import (
    UNPARSEABLE,
    RelationLabel,
    Sample,
    canonicalize_relation,
    expand_abbreviations,
)

if TYPE_CHECKING:  # circular at runtime only
    from .splitter import HardCaseRecord

SIMPLE = "simple"
CONTRASTIVE = "contrastive"

# Fixed task-description header; opens every instruction exactly once.
TASK_DESCRIPTION = (
    "Now you need to complete the relation extraction task, which is to give "
    "you a sentence, two entities in the sentence, and some predefined "
    "relations lists. You need to tell me what relation exists between these "
    "two entities."
)

# Blocks are joined by a single newline; demonstrations inside a block by a
# single space.
BLOCK_JOIN = "\n"
_DEMO_JOIN = " "


@dataclass(frozen=True)
class InstructionRecord:
    """A fully rendered prompt plus the metadata training needs."""

    kind: str  # SIMPLE or CONTRASTIVE
    text: str
    target: RelationLabel
    sample_id: str
    relation_list_snapshot: Tuple[RelationLabel, ...]
    # For contrastive records: the wrong prediction the hard case carried.
    wrong_prediction: Optional[RelationLabel] = None


def render_prediction(sample: Sample, relations: Sequence[RelationLabel]) -> str:
    """The closing block: query sentence, entity pair, candidate list."""
    relation_list = ", ".join(relations)
    return (
        f'Now given the sentence: "{sample.sentence}", what is the relation '
        f'between "{sample.head.text}" and "{sample.tail.text}"? Please '
        f"select from these relations: [{relation_list}], and strictly "
        'return the answer in the following JSON format:{"relation": xxx}.'
    )


def render_positive_block(
    positives: Sequence[Sample],
    relation: RelationLabel,
    similar_relation: RelationLabel,
    difference: Optional[str],
) -> str:
    """Positive demonstrations plus the similar-relation difference clause.

    ``difference`` None omits the analytical clause (the degraded form used
    by the no_p_r ablation).
    """
    demos = _DEMO_JOIN.join(
        f'sentence: "{p.sentence}", the correct relation between '
        f'"{p.head.text}" and "{p.tail.text}" is "{p.relation}".'
        for p in positives
    )
    text = (
        "Here are some examples with similar relations that may be helpful "
        f"to you: [{demos}]."
    )
    if difference is not None:
        text += (
            f' Please note that the relation "{similar_relation}" and the '
            f'relation "{relation}" are very similar, and their difference '
            f'lies in "{difference}". Please pay attention to discrimination.'
        )
    return text


def render_negative_block(
    negatives: Sequence["HardCaseRecord"], include_analysis: bool = True
) -> str:
    """Negative demonstrations: prior mistakes with their analyses.

    ``include_analysis`` False omits the error reason and correct-answer
    analysis sentences (the degraded form used by the no_n_r ablation).
    """
    demos = []
    for n in negatives:
        demo = (
            f'sentence: "{n.sample.sentence}", the correct relation between '
            f'"{n.sample.head.text}" and "{n.sample.tail.text}" is '
            f'"{n.sample.relation}", but your prediction is '
            f'"{n.wrong_prediction}".'
        )
        if include_analysis:
            demo += (
                f' This is the reason for the error: "{n.error_reason}". The '
                f'reason for the correct answer is: "{n.answer_analysis}".'
            )
        demos.append(demo)
    joined = _DEMO_JOIN.join(demos)
    return (
        f"Before this, you have made these mistakes: [{joined}], please try "
        "to avoid repeating these mistakes."
    )


def build_simple(
    sample: Sample, seen_relations: Sequence[RelationLabel]
) -> InstructionRecord:
    """Task description + prediction block over the seen-relation list."""
    relations = tuple(seen_relations)
    if not relations:
        raise ValueError("seen_relations must be non-empty")
    if sample.relation not in relations:
        raise ValueError(
            f"sample {sample.id!r} relation {sample.relation!r} not in the "
            "candidate relation list"
        )
    text = BLOCK_JOIN.join(
        [TASK_DESCRIPTION, render_prediction(sample, relations)]
    )
    return InstructionRecord(
        kind=SIMPLE,
        text=text,
        target=sample.relation,
        sample_id=sample.id,
        relation_list_snapshot=relations,
    )


def build_contrastive(
    record: "HardCaseRecord",
    positives: Sequence[Sample],
    difference: Optional[str],
    negatives: Sequence["HardCaseRecord"],
    seen_relations: Sequence[RelationLabel],
    include_negative_analysis: bool = True,
) -> InstructionRecord:
    """Task description + positive block + negative block + prediction.

    Either demonstration set may be empty, in which case its block is
    omitted entirely (these degraded forms double as the no_positive /
    no_negative ablation renderings). Both empty is an error: callers
    should build a simple instruction instead.
    """
    if not positives and not negatives:
        raise ValueError(
            "both demonstration sets are empty; use build_simple instead"
        )
    relations = tuple(seen_relations)
    sample = record.sample
    if sample.relation not in relations:
        raise ValueError(
            f"hard case {sample.id!r} relation {sample.relation!r} not in "
            "the candidate relation list"
        )
    blocks: List[str] = [TASK_DESCRIPTION]
    if positives:
        blocks.append(
            render_positive_block(
                positives,
                relation=sample.relation,
                similar_relation=positives[0].relation,
                difference=difference,
            )
        )
    if negatives:
        blocks.append(
            render_negative_block(
                negatives, include_analysis=include_negative_analysis
            )
        )
    blocks.append(render_prediction(sample, relations))
    return InstructionRecord(
        kind=CONTRASTIVE,
        text=BLOCK_JOIN.join(blocks),
        target=sample.relation,
        sample_id=sample.id,
        relation_list_snapshot=relations,
        wrong_prediction=record.wrong_prediction,
    )


# --- Response parsing ------------------------------------------------------

_QUOTE_MAP = str.maketrans({"“": '"', "”": '"', "‘": "'", "’": "'"})
_OBJECT_RE = re.compile(r"\{[^{}]*\}")
_RELATION_VALUE_RE = re.compile(
    r"""["']?relation["']?\s*:\s*["']?([^"'}\n]+)""", re.IGNORECASE
)


def _extract_relation_value(response: str) -> Optional[str]:
    """First {...} object carrying a relation key, parsed leniently."""
    text = response.translate(_QUOTE_MAP)
    for match in _OBJECT_RE.finditer(text):
        blob = match.group(0)
        for attempt in (blob, blob.replace("'", '"')):
            try:
                obj = json.loads(attempt)
            except json.JSONDecodeError:
                continue
            value = obj.get("relation") if isinstance(obj, dict) else None
            if isinstance(value, str) and value.strip():
                return value.strip()
        loose = _RELATION_VALUE_RE.search(blob)
        if loose:
            value = loose.group(1).strip().strip("'\"")
            if value:
                return value
    return None


def _unique_substring_match(
    text: str, canonical_candidates: Sequence[Tuple[str, RelationLabel]]
) -> Optional[RelationLabel]:
    """Return the single candidate mentioned in ``text``, if exactly one.

    Matching is on token boundaries. A matched name that is contained in
    another matched name is discarded, so mentioning "organization founded
    by" does not also count as "organization founded".
    """
    padded = " " + re.sub(r"[^a-z0-9]+", " ", text.lower()) + " "
    matches = [
        (canon, original)
        for canon, original in canonical_candidates
        if canon and f" {canon} " in padded
    ]
    survivors = [
        (canon, original)
        for canon, original in matches
        if not any(canon != other and canon in other for other, _ in matches)
    ]
    if len(survivors) == 1:
        return survivors[0][1]
    return None


def parse_prediction(
    response: str, candidates: Sequence[RelationLabel]
) -> RelationLabel:
    """Map a model response to one of ``candidates`` or UNPARSEABLE.

    Strategy: extract the first JSON-ish object with a relation key and
    match its canonicalized value exactly; failing that, look for a unique
    candidate name mentioned in the text (abbreviations expanded).
    """
    if not candidates:
        raise ValueError("candidates must be non-empty")
    canonical = [(canonicalize_relation(c), c) for c in candidates]
    value = _extract_relation_value(response)
    if value is not None:
        canon_value = canonicalize_relation(value)
        for canon, original in canonical:
            if canon == canon_value:
                return original
        search_text = expand_abbreviations(value)
    else:
        search_text = expand_abbreviations(response)
    matched = _unique_substring_match(search_text, canonical)
    return matched if matched is not None else UNPARSEABLE


# --- Instruction text introspection (used by the simulated backend) --------


@dataclass(frozen=True)
class InstructionQuery:
    sentence: str
    head: str
    tail: str
    relations: Tuple[RelationLabel, ...]


_QUERY_RE = re.compile(
    r'Now given the sentence: "(?P<sentence>.*)", what is the relation '
    r'between "(?P<head>[^"]*)" and "(?P<tail>[^"]*)"\? Please select from '
    r"these relations: \[(?P<relations>.*?)\], and strictly return",
    re.DOTALL,
)


def parse_instruction_query(text: str) -> InstructionQuery:
    """Recover the query sentence, entity pair, and candidate list from a
    rendered instruction (the prediction block is always the final one)."""
    matches = list(_QUERY_RE.finditer(text))
    if not matches:
        raise ValueError("instruction text has no prediction block")
    found = matches[-1]
    relations = tuple(
        r.strip() for r in found.group("relations").split(",") if r.strip()
    )
    return InstructionQuery(
        sentence=found.group("sentence"),
        head=found.group("head"),
        tail=found.group("tail"),
        relations=relations,
    )
