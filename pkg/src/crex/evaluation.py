"""Accuracy measurement over seen relations, aggregation, and reports.

After each task the backend predicts every test sample of every relation
seen so far (candidate list = all seen relations). Unparseable responses
count as wrong — excluding them would silently inflate accuracy.
"""

from __future__ import annotations

import io
import json
import logging
import statistics
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

from .backend import ModelBackend
from .corpus import RelationLabel, Sample
from .instructions import build_simple, parse_prediction

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    per_relation: Dict[RelationLabel, Tuple[int, int]]  # correct, total

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_relation": {
                r: {"correct": c, "total": t}
                for r, (c, t) in sorted(self.per_relation.items())
            },
        }


def evaluate_seen(
    backend: ModelBackend,
    seen_tests: Sequence[Sample],
    seen_relations: Sequence[RelationLabel],
) -> EvalResult:
    """Accuracy over the union of all seen test sets."""
    if not seen_tests:
        raise ValueError("no test samples to evaluate")
    relations = tuple(seen_relations)
    correct: Dict[RelationLabel, int] = {}
    total: Dict[RelationLabel, int] = {}
    for sample in seen_tests:
        instruction = build_simple(sample, relations)
        predicted = parse_prediction(backend.infer(instruction), relations)
        total[sample.relation] = total.get(sample.relation, 0) + 1
        if predicted == sample.relation:
            correct[sample.relation] = correct.get(sample.relation, 0) + 1
    per_relation = {
        r: (correct.get(r, 0), total[r]) for r in total
    }
    accuracy = sum(correct.values()) / len(seen_tests)
    return EvalResult(accuracy=accuracy, per_relation=per_relation)


@dataclass
class RunReport:
    """Everything one task sequence produced, in serializable form."""

    sequence_seed: int
    backend_identity: str
    task_relations: List[List[RelationLabel]]
    accuracy_by_task: List[float]
    per_relation_by_task: List[Dict[str, Dict[str, int]]]
    counts_by_task: List[Dict[str, int]]
    config_echo: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "sequence_seed": self.sequence_seed,
            "backend_identity": self.backend_identity,
            "task_relations": self.task_relations,
            "accuracy_by_task": self.accuracy_by_task,
            "per_relation_by_task": self.per_relation_by_task,
            "counts_by_task": self.counts_by_task,
            "config_echo": self.config_echo,
        }

    def to_json(self) -> str:
        # sort_keys + fixed separators => byte-stable serialization.
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(
            sequence_seed=data["sequence_seed"],
            backend_identity=data["backend_identity"],
            task_relations=data["task_relations"],
            accuracy_by_task=data["accuracy_by_task"],
            per_relation_by_task=data["per_relation_by_task"],
            counts_by_task=data["counts_by_task"],
            config_echo=data.get("config_echo", {}),
        )


def aggregate_runs(reports: Sequence[RunReport]) -> dict:
    """Per-task mean and sample standard deviation across sequences."""
    if not reports:
        raise ValueError("no reports to aggregate")
    lengths = {len(r.accuracy_by_task) for r in reports}
    if len(lengths) != 1:
        raise ValueError(f"reports disagree on task count: {sorted(lengths)}")
    num_tasks = lengths.pop()
    means: List[float] = []
    stds: List[float] = []
    for step in range(num_tasks):
        column = [r.accuracy_by_task[step] for r in reports]
        means.append(sum(column) / len(column))
        stds.append(statistics.stdev(column) if len(column) > 1 else 0.0)
    return {
        "num_sequences": len(reports),
        "num_tasks": num_tasks,
        "mean_by_task": means,
        "std_by_task": stds,
        "std_kind": "sample",
    }


def accuracy_matrix_csv(reports: Sequence[RunReport]) -> str:
    """CSV: one row per sequence, one column per task."""
    if not reports:
        raise ValueError("no reports to export")
    buffer = io.StringIO()
    num_tasks = len(reports[0].accuracy_by_task)
    header = ["sequence_seed"] + [f"T{i + 1}" for i in range(num_tasks)]
    buffer.write(",".join(header) + "\n")
    for report in reports:
        row = [str(report.sequence_seed)] + [
            f"{a:.6f}" for a in report.accuracy_by_task
        ]
        buffer.write(",".join(row) + "\n")
    return buffer.getvalue()


def format_accuracy_table(aggregate: dict, label: str = "run") -> str:
    """Plain-text table: accuracy after each task, mean ± std."""
    header_cells = [f"T{i + 1}" for i in range(aggregate["num_tasks"])]
    rows = [
        " | ".join([f"{'':<16}"] + [f"{c:>13}" for c in header_cells]),
        " | ".join(
            [f"{label:<16}"]
            + [
                f"{mean * 100:6.1f} ± {std * 100:4.1f}"
                for mean, std in zip(
                    aggregate["mean_by_task"], aggregate["std_by_task"]
                )
            ]
        ),
    ]
    return "\n".join(rows) + "\n"


def format_comparison_table(comparison: dict) -> str:
    """Plain-text table comparing variants: one row per variant, columns
    T1..Tk of mean accuracy. ``comparison`` maps variant name to its
    per-task mean vector; "full" sorts first, everything else by name."""
    if not comparison:
        raise ValueError("no variants to compare")
    lengths = {len(v) for v in comparison.values()}
    if len(lengths) != 1:
        raise ValueError(f"variants disagree on task count: {sorted(lengths)}")
    num_tasks = lengths.pop()
    names = sorted(comparison, key=lambda n: (n != "full", n))
    lines = [
        " | ".join(
            [f"{'variant':<16}"] + [f"{f'T{i + 1}':>6}" for i in range(num_tasks)]
        )
    ]
    for name in names:
        cells = [f"{mean * 100:6.1f}" for mean in comparison[name]]
        lines.append(" | ".join([f"{name:<16}"] + cells))
    return "\n".join(lines) + "\n"
