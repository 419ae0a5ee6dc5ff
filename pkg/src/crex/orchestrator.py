"""The continual learning loop.

For each task in a sequence: classify the new training data into easy and
hard by pre-learning inference, annotate hard cases, retrieve positive and
negative demonstrations from memory, fine-tune on simple + contrastive
instructions (phase 1), select the new relations' memory, replay all
memory as simple instructions (phase 2), and evaluate on every seen test
set. Everything is seeded so a run is reproducible bit for bit.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, Field

from . import corpus
from .analyst import AnalystClient
from .backend import (
    ModelBackend,
    RemoteBackend,
    SimulatedBackend,
    TrainBatchItem,
)
from .corpus import RelationLabel, Sample, TaskSequence, TaskSpec
from .embedding import CachedEmbedder, Embedder, HashingEmbedder, RemoteEmbedder
from .evaluation import EvalResult, RunReport, evaluate_seen
from .instructions import CONTRASTIVE, SIMPLE, build_contrastive, build_simple
from .memory import DualMemoryStore, select_memory_kmeans
from .recording import RecordingBackend
from .retrieval import (
    RelationPrototype,
    most_similar_relation,
    relation_prototype,
    retrieve_negative,
    retrieve_positive,
)
from .seeding import derive_rng, derive_seed
from .splitter import HardCaseRecord, annotate_hard_case, classify_task_data

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """All knobs of a run; defaults mirror the standard configuration."""

    dataset_path: str
    dataset_format: str = "tacred-like"
    num_tasks: int = Field(default=10, ge=1)
    num_sequences: int = Field(default=5, ge=1)
    memory_size: int = Field(default=5, ge=1)
    k_p: int = Field(default=3, ge=1)
    k_n: int = Field(default=3, ge=1)
    epochs_per_phase: int = Field(default=2, ge=1)
    learning_rate: float = Field(default=3e-5, gt=0)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 7
    train_cap: int = Field(default=320, ge=1)
    test_cap: int = Field(default=40, ge=1)

    backend: Literal["sim", "remote"] = "sim"
    backend_url: Optional[str] = None
    backend_token_env: str = "CREX_BACKEND_TOKEN"
    analyst_mode: Literal["fallback", "remote", "replay"] = "fallback"
    analyst_url: Optional[str] = None
    analyst_token_env: str = "CREX_ANALYST_TOKEN"
    embedder: Literal["hash", "remote"] = "hash"
    embedding_dim: int = Field(default=256, ge=2)
    sim_pull_rate: float = 0.3
    sim_push_rate: float = 0.1

    # Ablation switches (all off = full pipeline).
    no_hard_split: bool = False
    no_positive: bool = False
    no_negative: bool = False
    no_p_r: bool = False
    no_n_r: bool = False
    no_replay: bool = False

    out_dir: Optional[str] = None

    def echo(self) -> dict:
        """Config as embedded in reports; output location excluded so a
        replay into a different directory stays byte-identical."""
        data = self.model_dump()
        data.pop("out_dir")
        return data


ABLATION_FLAGS = ("no_hard_split", "no_positive", "no_negative", "no_p_r", "no_n_r")


class TaskExecutionError(RuntimeError):
    """A task step failed; carries the checkpoint to resume from."""

    def __init__(self, task_index: int, checkpoint_id: str, cause: Exception):
        super().__init__(
            f"task {task_index} failed ({cause}); backend checkpoint "
            f"{checkpoint_id} precedes the task"
        )
        self.task_index = task_index
        self.checkpoint_id = checkpoint_id


def make_embedder(config: RunConfig) -> Embedder:
    if config.embedder == "hash":
        return CachedEmbedder(HashingEmbedder(config.embedding_dim))
    if not config.backend_url:
        raise ValueError("remote embedder requires backend_url")
    return CachedEmbedder(
        RemoteEmbedder(config.backend_url, token_env=config.backend_token_env)
    )


def make_backend(
    config: RunConfig, sequence_seed: int, embedder: Embedder
) -> ModelBackend:
    if config.backend == "sim":
        return SimulatedBackend(
            embedder=embedder,
            pull_rate=config.sim_pull_rate,
            push_rate=config.sim_push_rate,
            seed=derive_seed(sequence_seed, "backend"),
        )
    if not config.backend_url:
        raise ValueError("remote backend requires backend_url")
    return RemoteBackend(config.backend_url, token_env=config.backend_token_env)


def make_analyst(config: RunConfig, cache_path: Optional[Path]) -> AnalystClient:
    return AnalystClient(
        mode=config.analyst_mode,
        base_url=config.analyst_url,
        token_env=config.analyst_token_env,
        cache_path=cache_path,
    )


@dataclass
class SequenceState:
    """Everything that persists across tasks within one sequence."""

    config: RunConfig
    sequence_seed: int
    backend: ModelBackend
    analyst: AnalystClient
    embedder: Embedder
    seen_order: List[RelationLabel] = field(default_factory=list)
    prototypes: Dict[RelationLabel, RelationPrototype] = field(default_factory=dict)
    memory: DualMemoryStore = field(init=False)
    seen_tests: List[Sample] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.memory = DualMemoryStore(m=self.config.memory_size)


@dataclass
class TaskLog:
    task_index: int
    relations: List[RelationLabel]
    counts: Dict[str, int]
    evaluation: EvalResult


def _contrastive_items(
    state: SequenceState,
    task: TaskSpec,
    records: Sequence[HardCaseRecord],
    candidates: Sequence[RelationLabel],
    previous: Sequence[RelationLabel],
    easy_by_relation: Dict[RelationLabel, List[Sample]],
) -> List[TrainBatchItem]:
    """Build one contrastive instruction per hard case that retrieves at
    least one demonstration. Task 1 never qualifies (no earlier memory)."""
    config = state.config
    if not previous:
        return []
    items: List[TrainBatchItem] = []
    hard_pool = state.memory.hard_union(before_task=task.index)
    for record in records:
        relation = record.sample.relation
        similar = most_similar_relation(relation, previous, state.prototypes)
        positives: List[Sample] = []
        if not config.no_positive:
            positives = retrieve_positive(
                record.sample,
                state.memory.easy_of(similar),
                config.k_p,
                state.embedder,
            )
        negatives: List[HardCaseRecord] = []
        if not config.no_negative:
            negatives = retrieve_negative(
                record, hard_pool, config.k_n, state.embedder
            )
        if not positives and not negatives:
            continue
        difference: Optional[str] = None
        if positives and not config.no_p_r:
            example_pool = easy_by_relation.get(relation, [])
            rng = derive_rng(
                state.sequence_seed, "pr-example", task.index, relation, similar
            )
            example = rng.choice(example_pool) if example_pool else record.sample
            similar_example = rng.choice(state.memory.easy_of(similar))
            difference = state.analyst.gen_relation_contrast(
                relation, similar, example, similar_example
            )
        instruction = build_contrastive(
            record,
            positives,
            difference,
            negatives,
            candidates,
            include_negative_analysis=not config.no_n_r,
        )
        items.append(
            TrainBatchItem(
                instruction=instruction,
                target=relation,
                weight_hint=CONTRASTIVE,
            )
        )
    return items


def run_task(state: SequenceState, task: TaskSpec) -> TaskLog:
    """Execute one task of the continual loop; see module docstring."""
    start_checkpoint = state.backend.checkpoint()
    try:
        return _run_task_inner(state, task)
    except Exception as exc:
        raise TaskExecutionError(task.index, start_checkpoint, exc) from exc


def _run_task_inner(state: SequenceState, task: TaskSpec) -> TaskLog:
    config = state.config
    previous = list(state.seen_order)
    new_relations = sorted(task.relations)
    candidates = tuple(previous + new_relations)
    train_data = list(task.train)

    # (1) classify new data into easy/hard via pre-learning inference
    if config.no_hard_split:
        easy_all, hard_pairs = train_data, []
    else:
        easy_all, hard_pairs = classify_task_data(
            train_data, candidates, state.backend
        )

    # (2) annotate hard cases with error reason + correct-answer analysis
    records = [
        annotate_hard_case(sample, wrong, state.analyst, task.index)
        for sample, wrong in hard_pairs
    ]

    easy_by_relation = corpus.group_by_relation(easy_all)
    records_by_relation: Dict[RelationLabel, List[HardCaseRecord]] = {}
    for record in records:
        records_by_relation.setdefault(record.sample.relation, []).append(record)

    # Relation prototypes are frozen at the learning task, computed over
    # the relation's full training data.
    train_by_relation = corpus.group_by_relation(train_data)
    for relation in new_relations:
        state.prototypes[relation] = relation_prototype(
            relation, train_by_relation[relation], state.embedder
        )

    # (3) demonstrations + contrastive instructions for qualifying hard cases
    contrastive = _contrastive_items(
        state, task, records, candidates, previous, easy_by_relation
    )

    # (4) phase 1: dual-task fine-tuning on simple + contrastive items
    phase1 = [
        TrainBatchItem(
            instruction=build_simple(sample, candidates),
            target=sample.relation,
            weight_hint=SIMPLE,
        )
        for sample in train_data
    ]
    phase1.extend(contrastive)
    derive_rng(state.sequence_seed, "phase1-shuffle", task.index).shuffle(phase1)
    state.backend.train(
        phase1,
        epochs=config.epochs_per_phase,
        learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        seed=derive_seed(state.sequence_seed, "phase1-train", task.index),
    )

    # (5) memory selection for the new relations
    for relation in new_relations:
        easy_selection = select_memory_kmeans(
            easy_by_relation.get(relation, []),
            config.memory_size,
            state.embedder,
            derive_seed(state.sequence_seed, "memory-easy", task.index, relation),
        )
        hard_selection = select_memory_kmeans(
            records_by_relation.get(relation, []),
            config.memory_size,
            state.embedder,
            derive_seed(state.sequence_seed, "memory-hard", task.index, relation),
        )
        state.memory.add_relation(
            relation, task.index, easy_selection, hard_selection
        )

    # (6) phase 2: replay all memory as simple instructions
    easy_union, hard_union = state.memory.all_memory()
    replay_samples = list(easy_union) + [h.sample for h in hard_union]
    phase2_count = 0
    if replay_samples and not config.no_replay:
        phase2 = [
            TrainBatchItem(
                instruction=build_simple(sample, candidates),
                target=sample.relation,
                weight_hint=SIMPLE,
            )
            for sample in replay_samples
        ]
        derive_rng(state.sequence_seed, "phase2-shuffle", task.index).shuffle(phase2)
        state.backend.train(
            phase2,
            epochs=config.epochs_per_phase,
            learning_rate=config.learning_rate,
            batch_size=config.batch_size,
            seed=derive_seed(state.sequence_seed, "phase2-train", task.index),
        )
        phase2_count = len(phase2)

    # (7) evaluate on all seen test data
    state.seen_tests.extend(task.test)
    state.seen_order = list(candidates)
    evaluation = evaluate_seen(state.backend, state.seen_tests, candidates)

    memory_counts = state.memory.counts()
    counts = {
        "train": len(train_data),
        "easy": len(easy_all),
        "hard": len(records),
        "phase1_simple": len(train_data),
        "phase1_contrastive": len(contrastive),
        "phase2_items": phase2_count,
        "memory_easy_total": memory_counts["easy"],
        "memory_hard_total": memory_counts["hard"],
        "test_seen": len(state.seen_tests),
    }
    logger.info(
        "task %d done: accuracy=%.4f counts=%s",
        task.index, evaluation.accuracy, counts,
    )
    return TaskLog(
        task_index=task.index,
        relations=new_relations,
        counts=counts,
        evaluation=evaluation,
    )


def run_sequence(
    config: RunConfig,
    sequence: TaskSequence,
    backend: ModelBackend,
    analyst: AnalystClient,
    embedder: Embedder,
) -> RunReport:
    """Run every task of one sequence on a fresh backend."""
    state = SequenceState(
        config=config,
        sequence_seed=sequence.seed,
        backend=backend,
        analyst=analyst,
        embedder=embedder,
    )
    logs: List[TaskLog] = []
    for task in sequence.tasks:
        logs.append(run_task(state, task))
    return RunReport(
        sequence_seed=sequence.seed,
        backend_identity=backend.identity,
        task_relations=[list(log.relations) for log in logs],
        accuracy_by_task=[log.evaluation.accuracy for log in logs],
        per_relation_by_task=[
            log.evaluation.to_dict()["per_relation"] for log in logs
        ],
        counts_by_task=[log.counts for log in logs],
        config_echo=config.echo(),
    )


def prepare_sequences(config: RunConfig) -> Tuple[List[Sample], List[TaskSequence]]:
    """Load the dataset, apply per-relation caps, and build the task
    sequences this config asks for."""
    samples = corpus.load_dataset(config.dataset_path, config.dataset_format)
    train, test = corpus.cap_per_relation(
        samples, config.train_cap, config.test_cap, config.seed
    )
    sequences = corpus.build_task_sequences(
        {s.relation for s in samples},
        config.num_tasks,
        config.num_sequences,
        config.seed,
        train_by_relation=corpus.group_by_relation(train),
        test_by_relation=corpus.group_by_relation(test),
    )
    return samples, sequences


def run_all(config: RunConfig, out_dir: Path) -> Tuple[List[RunReport], dict]:
    """Run num_sequences sequences, writing all artifacts under out_dir."""
    from .evaluation import accuracy_matrix_csv, aggregate_runs, format_accuracy_table

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(config.model_dump(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    _, sequences = prepare_sequences(config)
    reports: List[RunReport] = []
    for index, sequence in enumerate(sequences):
        seq_dir = out_dir / f"seq-{index}"
        seq_dir.mkdir(parents=True, exist_ok=True)
        (seq_dir / "manifest.json").write_text(
            json.dumps(corpus.sequence_manifest(sequence), sort_keys=True, indent=2)
            + "\n",
            encoding="utf-8",
        )
        embedder = make_embedder(config)
        backend = RecordingBackend(
            make_backend(config, sequence.seed, embedder),
            seq_dir / "backend_log.jsonl",
        )
        analyst = make_analyst(config, seq_dir / "analyst_cache.jsonl")
        report = run_sequence(config, sequence, backend, analyst, embedder)
        (seq_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
        reports.append(report)
        logger.info(
            "sequence %d finished: accuracy=%s",
            index, [f"{a:.3f}" for a in report.accuracy_by_task],
        )
    aggregate = aggregate_runs(reports)
    (out_dir / "aggregate.json").write_text(
        json.dumps(aggregate, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out_dir / "accuracy.csv").write_text(
        accuracy_matrix_csv(reports), encoding="utf-8"
    )
    (out_dir / "table.txt").write_text(
        format_accuracy_table(aggregate), encoding="utf-8"
    )
    return reports, aggregate


def run_ablation_matrix(
    config: RunConfig, out_dir: Path, flags: Optional[Sequence[str]] = None
) -> dict:
    """Run the full pipeline plus one run per ablation flag.

    Writes each variant under ``out_dir/<variant>/`` and a cross-variant
    comparison (mean accuracy after each task) as JSON and a text table.
    """
    from .evaluation import format_comparison_table

    flags = tuple(flags) if flags is not None else ABLATION_FLAGS
    unknown = [f for f in flags if f not in ABLATION_FLAGS]
    if unknown:
        raise ValueError(f"unknown ablation flags: {unknown}")
    out_dir = Path(out_dir)
    variants = [("full", {})] + [(flag, {flag: True}) for flag in flags]
    comparison: dict = {}
    for name, overrides in variants:
        variant_config = config.model_copy(update=overrides)
        _, aggregate = run_all(variant_config, out_dir / name)
        comparison[name] = aggregate["mean_by_task"]
    (out_dir / "comparison.json").write_text(
        json.dumps(comparison, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (out_dir / "comparison.txt").write_text(
        format_comparison_table(comparison), encoding="utf-8"
    )
    return comparison


def regenerate_reports(run_dir: Path) -> Tuple[dict, str]:
    """Rebuild aggregate artifacts from the per-sequence reports on disk."""
    from .evaluation import (
        RunReport,
        accuracy_matrix_csv,
        aggregate_runs,
        format_accuracy_table,
    )

    run_dir = Path(run_dir)
    report_paths = sorted(run_dir.glob("seq-*/report.json"))
    if not report_paths:
        raise FileNotFoundError(f"no seq-*/report.json under {run_dir}")
    reports = [
        RunReport.from_dict(json.loads(p.read_text(encoding="utf-8")))
        for p in report_paths
    ]
    aggregate = aggregate_runs(reports)
    table = format_accuracy_table(aggregate)
    (run_dir / "aggregate.json").write_text(
        json.dumps(aggregate, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    (run_dir / "accuracy.csv").write_text(
        accuracy_matrix_csv(reports), encoding="utf-8"
    )
    (run_dir / "table.txt").write_text(table, encoding="utf-8")
    return aggregate, table


def replay_run(run_dir: Path) -> Tuple[bool, List[str]]:
    """Re-execute a completed run from its recorded logs.

    Returns (ok, messages). ok is True when every sequence reproduced a
    byte-identical report from the recorded backend/analyst responses.
    """
    from .recording import ReplayBackend

    run_dir = Path(run_dir)
    config = RunConfig.model_validate(
        json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    )
    samples = corpus.load_dataset(config.dataset_path, config.dataset_format)
    messages: List[str] = []
    ok = True
    seq_dirs = sorted(run_dir.glob("seq-*"))
    if not seq_dirs:
        return False, [f"no sequence directories under {run_dir}"]
    for seq_dir in seq_dirs:
        manifest = json.loads(
            (seq_dir / "manifest.json").read_text(encoding="utf-8")
        )
        sequence = corpus.sequence_from_manifest(manifest, samples)
        embedder = make_embedder(config)
        backend = ReplayBackend(seq_dir / "backend_log.jsonl")
        analyst = AnalystClient(
            mode="replay", cache_path=seq_dir / "analyst_cache.jsonl"
        )
        report = run_sequence(config, sequence, backend, analyst, embedder)
        recorded = (seq_dir / "report.json").read_text(encoding="utf-8")
        if report.to_json() == recorded:
            messages.append(f"{seq_dir.name}: report reproduced byte-identically")
        else:
            messages.append(f"{seq_dir.name}: report DIFFERS from recording")
            ok = False
    return ok, messages
