"""Record/replay wrappers for model backends.

Every backend call a run makes is appended to a JSONL log: a content hash
of the request plus the full response. Replaying a run swaps the real
backend for ``ReplayBackend``, which serves responses from the log in
strict order and refuses to answer if the re-executed pipeline diverges
from what was recorded (different call kind, different request bytes, or
extra calls). Byte-identical reports out of a replay are therefore strong
evidence that the pipeline is deterministic given backend behavior.
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence

from .backend import ModelBackend, TrainBatchItem, TrainSummary

logger = logging.getLogger(__name__)


class ReplayMismatchError(RuntimeError):
    """The replayed call sequence diverged from the recorded one."""


def _request_fingerprint(kind: str, payload: dict) -> str:
    encoded = json.dumps({"kind": kind, **payload}, sort_keys=True)
    return hashlib.sha256(encoded.encode("utf-8")).hexdigest()


def _train_payload(
    batch: Sequence[TrainBatchItem],
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> dict:
    return {
        "items": [
            [item.instruction.text, item.target, item.weight_hint]
            for item in batch
        ],
        "epochs": epochs,
        "learning_rate": learning_rate,
        "batch_size": batch_size,
        "seed": seed,
    }


class RecordingBackend(ModelBackend):
    """Pass-through wrapper that appends every call to a log file."""

    def __init__(self, inner: ModelBackend, path: Path):
        self.inner = inner
        self.identity = inner.identity
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._append({"kind": "header", "identity": inner.identity})

    def _append(self, entry: dict) -> None:
        with self.path.open("a", encoding="utf-8") as handle:
            handle.write(json.dumps(entry, sort_keys=True) + "\n")

    def infer(self, instruction) -> str:
        response = self.inner.infer(instruction)
        self._append(
            {
                "kind": "infer",
                "request": _request_fingerprint(
                    "infer", {"text": instruction.text}
                ),
                "response": response,
            }
        )
        return response

    def train(
        self,
        batch: Sequence[TrainBatchItem],
        epochs: int,
        learning_rate: float,
        batch_size: int,
        seed: int,
    ) -> TrainSummary:
        summary = self.inner.train(batch, epochs, learning_rate, batch_size, seed)
        payload = _train_payload(batch, epochs, learning_rate, batch_size, seed)
        self._append(
            {
                "kind": "train",
                "request": _request_fingerprint("train", payload),
                "response": {
                    "items_seen": summary.items_seen,
                    "loss": summary.loss,
                },
            }
        )
        return summary

    def checkpoint(self) -> str:
        checkpoint_id = self.inner.checkpoint()
        self._append(
            {
                "kind": "checkpoint",
                "request": _request_fingerprint("checkpoint", {}),
                "response": checkpoint_id,
            }
        )
        return checkpoint_id

    def restore(self, checkpoint_id: str) -> None:
        self.inner.restore(checkpoint_id)
        self._append(
            {
                "kind": "restore",
                "request": _request_fingerprint(
                    "restore", {"id": checkpoint_id}
                ),
                "response": None,
            }
        )


class ReplayBackend(ModelBackend):
    """Backend that answers exclusively from a recorded call log."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self._entries: List[dict] = []
        with self.path.open("r", encoding="utf-8") as handle:
            for line in handle:
                line = line.strip()
                if line:
                    self._entries.append(json.loads(line))
        if not self._entries or self._entries[0].get("kind") != "header":
            raise ReplayMismatchError(f"{self.path} is not a backend call log")
        self.identity = self._entries[0]["identity"]
        self._cursor = 1

    def _next(self, kind: str, fingerprint: str) -> dict:
        if self._cursor >= len(self._entries):
            raise ReplayMismatchError(
                f"replay exhausted: pipeline issued an extra {kind} call"
            )
        entry = self._entries[self._cursor]
        if entry["kind"] != kind:
            raise ReplayMismatchError(
                f"call {self._cursor}: recorded {entry['kind']!r}, "
                f"replayed {kind!r}"
            )
        if entry["request"] != fingerprint:
            raise ReplayMismatchError(
                f"call {self._cursor}: {kind} request differs from the "
                "recorded one"
            )
        self._cursor += 1
        return entry

    def infer(self, instruction) -> str:
        entry = self._next(
            "infer", _request_fingerprint("infer", {"text": instruction.text})
        )
        return entry["response"]

    def train(
        self,
        batch: Sequence[TrainBatchItem],
        epochs: int,
        learning_rate: float,
        batch_size: int,
        seed: int,
    ) -> TrainSummary:
        payload = _train_payload(batch, epochs, learning_rate, batch_size, seed)
        entry = self._next("train", _request_fingerprint("train", payload))
        return TrainSummary(
            items_seen=entry["response"]["items_seen"],
            loss=entry["response"]["loss"],
        )

    def checkpoint(self) -> str:
        entry = self._next(
            "checkpoint", _request_fingerprint("checkpoint", {})
        )
        return entry["response"]

    def restore(self, checkpoint_id: str) -> None:
        self._next(
            "restore", _request_fingerprint("restore", {"id": checkpoint_id})
        )

    def finished(self) -> bool:
        return self._cursor == len(self._entries)
