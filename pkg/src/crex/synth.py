"""Synthetic corpora for desk-scale experiments.

Real benchmark numbers need a real language model; what the simulator can
show is *direction*: replay fights forgetting, and the easy/hard split
with contrastive instructions does not hurt. These generators build small
corpora with controllable token overlap so those directional effects are
measurable in seconds.

``forgetting_benchmark`` plants two analogous relation pairs: the
originals are learned in task 1 and their near-twins (relations sharing a
large fraction of vocabulary) arrive in tasks 3 and 4. Twin data is
systematically misclassified as the original relation before learning, so
the original's prototype gets pushed around exactly when the pipeline's
repair mechanisms (memory replay) matter.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from .corpus import Entity, RelationLabel, Sample, TaskSequence, TaskSpec
from .seeding import derive_rng, derive_seed

logger = logging.getLogger(__name__)

_FILLERS = ["the", "of", "was", "in", "a", "to", "for", "with", "on", "at"]


def _slug(name: str) -> str:
    return name.replace(" ", "")


@dataclass(frozen=True)
class RelationProfile:
    """Vocabulary recipe for one synthetic relation."""

    name: RelationLabel
    exclusive: Tuple[str, ...]
    shared: Tuple[str, ...] = ()  # tokens shared with an analogous twin
    shared_fraction: float = 0.0  # fraction of content tokens drawn shared


def _make_profile(
    name: str,
    exclusive_vocab: int,
    shared_pool: Optional[Sequence[str]] = None,
    shared_fraction: float = 0.0,
) -> RelationProfile:
    slug = _slug(name)
    return RelationProfile(
        name=name,
        exclusive=tuple(f"{slug}w{j}" for j in range(exclusive_vocab)),
        shared=tuple(shared_pool or ()),
        shared_fraction=shared_fraction if shared_pool else 0.0,
    )


def _sample_sentence(
    profile: RelationProfile,
    rng,
    sample_tag: str,
    tokens_per_sentence: int,
    filler_tokens: int,
) -> Tuple[str, Entity, Entity]:
    n_shared = round(profile.shared_fraction * tokens_per_sentence)
    n_shared = min(n_shared, len(profile.shared))
    n_exclusive = min(tokens_per_sentence - n_shared, len(profile.exclusive))
    # Without-replacement draws keep per-sentence vocabulary coverage high,
    # so same-relation sentences embed tightly together.
    content = rng.sample(profile.exclusive, n_exclusive)
    content += rng.sample(profile.shared, n_shared)
    fillers = [rng.choice(_FILLERS) for _ in range(filler_tokens)]
    # Entity mentions are unique per sample: orthogonal noise rather than a
    # shared component that could tilt prototype similarity.
    head = f"{sample_tag}h"
    tail = f"{sample_tag}t"
    tokens = [head] + content[: len(content) // 2] + fillers
    tokens += content[len(content) // 2 :] + [tail]
    sentence = " ".join(tokens)
    return sentence, Entity(text=head), Entity(text=tail)


def generate_relation_samples(
    profile: RelationProfile,
    count: int,
    seed: int,
    id_prefix: str,
    tokens_per_sentence: int = 10,
    filler_tokens: int = 3,
) -> List[Sample]:
    """Deterministic samples of one relation."""
    rng = derive_rng(seed, "synth", profile.name, id_prefix)
    samples = []
    for i in range(count):
        sample_id = f"{id_prefix}-{_slug(profile.name)}-{i:03d}"
        sentence, head, tail = _sample_sentence(
            profile, rng, sample_id, tokens_per_sentence, filler_tokens
        )
        samples.append(
            Sample(
                id=sample_id,
                sentence=sentence,
                head=head,
                tail=tail,
                relation=profile.name,
            )
        )
    return samples


def synthetic_corpus(
    seed: int,
    num_relations: int = 6,
    samples_per_relation: int = 30,
    tokens_per_sentence: int = 10,
    exclusive_vocab: int = 20,
) -> List[Sample]:
    """Disjoint-vocabulary corpus for smoke tests and toy runs."""
    names = [f"relation {chr(97 + i)}" for i in range(num_relations)]
    out: List[Sample] = []
    for name in names:
        profile = _make_profile(name, exclusive_vocab)
        out.extend(
            generate_relation_samples(
                profile,
                samples_per_relation,
                seed,
                "syn",
                tokens_per_sentence=min(tokens_per_sentence, exclusive_vocab),
            )
        )
    return out


# --- Planted forgetting benchmark -------------------------------------------

# Task layout is fixed by design: originals of the two analogous pairs sit
# in task 1 ("birth city" sorts first there, so it is the one relation that
# acquires easy memory at task 1 under the simulator), and their twins
# arrive in tasks 3 and 4.
_BENCHMARK_LAYOUT: List[List[str]] = [
    ["birth city", "employer name", "music genre"],
    ["film director", "game platform", "lake country"],
    ["birth province", "novel author", "opera language"],
    ["employer title", "river mouth", "ship builder"],
]
_TWINS = {
    "birth province": "birth city",
    "employer title": "employer name",
}
TASK1_RELATIONS = tuple(_BENCHMARK_LAYOUT[0])


def forgetting_benchmark(
    seed: int,
    train_per_relation: int = 12,
    test_per_relation: int = 8,
    tokens_per_sentence: int = 10,
    shared_fraction: float = 0.8,
    exclusive_vocab: int = 3,
    shared_vocab: int = 8,
) -> Tuple[List[Sample], TaskSequence]:
    """12 relations over 4 fixed tasks with two analogous pairs planted.

    Returns the full sample list and a ready task sequence (fixed relation
    layout; the seed drives data generation and all run-time randomness).

    The defaults are deliberately extreme: twins share 8 of their 10
    content tokens per sentence (full coverage of an 8-token pool), so a
    twin's pre-learning errors push the original's prototype until the
    shared component cancels. Without replay the original's test data is
    then captured by the twin; with replay the prototype is pulled back
    to its memory and accuracy recovers.
    """
    shared_pools: Dict[str, Tuple[str, ...]] = {}
    for twin, original in _TWINS.items():
        pool = tuple(
            f"{_slug(original)}{_slug(twin)}s{j}" for j in range(shared_vocab)
        )
        shared_pools[twin] = pool
        shared_pools[original] = pool

    profiles: Dict[str, RelationProfile] = {}
    for task_relations in _BENCHMARK_LAYOUT:
        for name in task_relations:
            profiles[name] = _make_profile(
                name,
                exclusive_vocab,
                shared_pool=shared_pools.get(name),
                shared_fraction=shared_fraction if name in shared_pools else 0.0,
            )

    all_samples: List[Sample] = []
    tasks: List[TaskSpec] = []
    for index, task_relations in enumerate(_BENCHMARK_LAYOUT, start=1):
        task = TaskSpec(index=index, relations=tuple(sorted(task_relations)))
        for name in sorted(task_relations):
            train = generate_relation_samples(
                profiles[name],
                train_per_relation,
                seed,
                "train",
                tokens_per_sentence=tokens_per_sentence,
            )
            test = generate_relation_samples(
                profiles[name],
                test_per_relation,
                seed,
                "test",
                tokens_per_sentence=tokens_per_sentence,
            )
            task.train.extend(train)
            task.test.extend(test)
            all_samples.extend(train)
            all_samples.extend(test)
        tasks.append(task)
    sequence = TaskSequence(seed=derive_seed(seed, "benchmark-sequence"), tasks=tasks)
    return all_samples, sequence
