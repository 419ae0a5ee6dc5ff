"""Easy/hard classification against scripted backends."""

import random

import pytest

from crex.analyst import AnalystClient
from crex.corpus import UNPARSEABLE
from crex.instructions import build_simple, parse_prediction
from crex.splitter import annotate_hard_case, classify_task_data
from helpers import (
    ScriptedBackend,
    adversarial_backend,
    first_candidate_backend,
    make_sample,
    oracle_backend,
)

RELATIONS = ("alpha relation", "beta relation", "gamma relation")


def _corpus(n=30, seed=1):
    rng = random.Random(seed)
    return [
        make_sample(
            f"s{i:03d}",
            f"numbered evidence sentence {i} token{rng.randrange(50)}",
            rng.choice(RELATIONS),
        )
        for i in range(n)
    ]


def _rederive(samples, backend_answer, seen):
    """Independent re-derivation of the split: render, answer, parse."""
    import json

    easy, hard = [], []
    for sample in samples:
        from crex.instructions import parse_instruction_query

        query = parse_instruction_query(build_simple(sample, seen).text)
        predicted = parse_prediction(
            json.dumps({"relation": backend_answer(query)}), seen
        )
        if predicted == sample.relation:
            easy.append(sample)
        else:
            hard.append((sample, predicted))
    return easy, hard


def test_always_right_backend_yields_no_hard_cases():
    samples = _corpus()
    backend = oracle_backend(samples)
    easy, hard = classify_task_data(samples, RELATIONS, backend)
    assert easy == samples
    assert hard == []


def test_always_wrong_backend_yields_no_easy_cases():
    samples = _corpus()
    backend = adversarial_backend(samples)
    easy, hard = classify_task_data(samples, RELATIONS, backend)
    assert easy == []
    assert [s.id for s, _ in hard] == [s.id for s in samples]
    for sample, wrong in hard:
        assert wrong != sample.relation
        assert wrong in RELATIONS


def test_fixed_answer_backend_matches_rederivation():
    samples = _corpus()
    backend = first_candidate_backend()
    easy, hard = classify_task_data(samples, RELATIONS, backend)
    expected_easy, expected_hard = _rederive(
        samples, lambda q: q.relations[0], RELATIONS
    )
    assert easy == expected_easy
    assert hard == expected_hard
    assert all(s.relation == RELATIONS[0] for s in easy)


def test_selective_backend_matches_rederivation():
    samples = _corpus(n=60, seed=2)
    wrong_for = lambda s: int(s.id[1:]) % 3 == 0  # noqa: E731
    backend = adversarial_backend(samples, wrong_for=wrong_for)
    easy, hard = classify_task_data(samples, RELATIONS, backend)
    assert {s.id for s in easy} == {s.id for s in samples if not wrong_for(s)}
    assert {s.id for s, _ in hard} == {s.id for s in samples if wrong_for(s)}


def test_unparseable_responses_become_hard_cases():
    samples = _corpus(n=5)
    backend = ScriptedBackend(lambda q: "mumble mumble")

    # the scripted wrapper wraps answers in JSON; "mumble mumble" is not a
    # candidate, so the parse falls through to UNPARSEABLE
    easy, hard = classify_task_data(samples, RELATIONS, backend)
    assert easy == []
    assert all(wrong == UNPARSEABLE for _, wrong in hard)


def test_classification_preserves_input_order_and_count():
    samples = _corpus(n=40, seed=3)
    backend = first_candidate_backend()
    easy, hard = classify_task_data(samples, RELATIONS, backend)
    assert len(easy) + len(hard) == len(samples)
    merged = sorted([s.id for s in easy] + [s.id for s, _ in hard])
    assert merged == sorted(s.id for s in samples)
    # relative order within each bucket follows the input
    easy_ids = [s.id for s in easy]
    assert easy_ids == [s.id for s in samples if s.id in set(easy_ids)]


def test_candidate_list_must_cover_gold_labels():
    samples = [make_sample("s1", "a sentence", "relation nobody announced")]
    with pytest.raises(ValueError, match="missing"):
        classify_task_data(samples, RELATIONS, first_candidate_backend())


def test_annotate_hard_case_attaches_analysis():
    sample = make_sample("s1", "a tricky sentence", "alpha relation")
    analyst = AnalystClient(mode="fallback")
    record = annotate_hard_case(sample, "beta relation", analyst, task_index=2)
    assert record.sample is sample
    assert record.wrong_prediction == "beta relation"
    assert record.task_index == 2
    assert "beta relation" in record.error_reason
    assert "alpha relation" in record.answer_analysis


def test_annotate_hard_case_rejects_empty_analysis():
    class EmptyAnalyst:
        def gen_error_analysis(self, sample, wrong):
            return "", ""

    sample = make_sample("s1", "a tricky sentence", "alpha relation")
    with pytest.raises(ValueError, match="empty analysis"):
        annotate_hard_case(sample, "beta relation", EmptyAnalyst(), task_index=1)
