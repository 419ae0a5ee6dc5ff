"""Model backends: the training/inference contract, a deterministic
simulator, and a remote client.

The engine only ever talks to a ``ModelBackend``. The simulator keeps one
prototype vector per relation and answers by cosine similarity, which is a
deliberately minimal stand-in for a fine-tuned language model: training
pulls the target relation's prototype toward the query sentence embedding,
and for contrastive items additionally pushes the previously recorded
wrong relation's prototype away. That push/pull pair is simulation
semantics — it exists so every pipeline branch has an observable,
deterministic effect at desk scale.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .corpus import RelationLabel
from .embedding import Embedder, HashingEmbedder
from .instructions import CONTRASTIVE, InstructionRecord, parse_instruction_query
from .retrieval import cosine
from .seeding import derive_seed
from .transport import ServiceClient

logger = logging.getLogger(__name__)

DEFAULT_PULL_RATE = 0.3
DEFAULT_PUSH_RATE = 0.1


@dataclass(frozen=True)
class TrainBatchItem:
    instruction: InstructionRecord
    target: RelationLabel
    weight_hint: str  # "simple" or "contrastive"

    def __post_init__(self) -> None:
        if self.target not in self.instruction.relation_list_snapshot:
            raise ValueError(
                f"target {self.target!r} not in the instruction's relation list"
            )


@dataclass(frozen=True)
class TrainSummary:
    items_seen: int
    loss: float


class ModelBackend:
    """Contract shared by the simulator and the remote client."""

    identity: str

    def infer(self, instruction: InstructionRecord) -> str:
        raise NotImplementedError

    def train(
        self,
        batch: Sequence[TrainBatchItem],
        epochs: int,
        learning_rate: float,
        batch_size: int,
        seed: int,
    ) -> TrainSummary:
        raise NotImplementedError

    def checkpoint(self) -> str:
        raise NotImplementedError

    def restore(self, checkpoint_id: str) -> None:
        raise NotImplementedError


class SimulatedBackend(ModelBackend):
    """Prototype-per-relation simulator.

    Inference: embed the instruction's query sentence and answer the
    candidate with the most similar prototype. Candidates without a
    prototype score -inf; if none has one, the first candidate is returned.

    Training: per epoch, items are visited in a seeded shuffled order.
    A target relation's prototype is created at the query embedding on
    first mention, then pulled toward each query by ``pull_rate``. A
    contrastive item additionally pushes the recorded wrong relation's
    prototype away by ``push_rate`` (skipped when that relation has no
    prototype yet).
    """

    def __init__(
        self,
        embedder: Optional[Embedder] = None,
        pull_rate: float = DEFAULT_PULL_RATE,
        push_rate: float = DEFAULT_PUSH_RATE,
        seed: int = 0,
    ):
        self.embedder = embedder if embedder is not None else HashingEmbedder()
        self.pull_rate = pull_rate
        self.push_rate = push_rate
        self.seed = seed
        self.prototypes: Dict[RelationLabel, np.ndarray] = {}
        self._snapshots: Dict[str, dict] = {}
        self.identity = f"simulated:{self.embedder.provider_id}"

    # -- inference ----------------------------------------------------------

    def infer(self, instruction: InstructionRecord) -> str:
        query = parse_instruction_query(instruction.text)
        if not query.relations:
            raise ValueError("instruction candidate list is empty")
        known = [r for r in query.relations if r in self.prototypes]
        if not known:
            answer = query.relations[0]
        else:
            x = self.embedder.embed(query.sentence)
            best_score = -np.inf
            answer = known[0]
            for relation in known:
                score = cosine(x, self.prototypes[relation])
                if score > best_score:
                    best_score = score
                    answer = relation
        return json.dumps({"relation": answer})

    # -- training -----------------------------------------------------------

    def _check_dim(self, x: np.ndarray) -> None:
        for vector in self.prototypes.values():
            if vector.shape != x.shape:
                raise ValueError(
                    f"embedding dimension {x.shape} does not match existing "
                    f"prototypes {vector.shape}"
                )
            break

    def train(
        self,
        batch: Sequence[TrainBatchItem],
        epochs: int,
        learning_rate: float,
        batch_size: int,
        seed: int,
    ) -> TrainSummary:
        if not batch:
            raise ValueError("training batch must be non-empty")
        if epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {epochs}")
        queries = [
            parse_instruction_query(item.instruction.text) for item in batch
        ]
        embeddings = [self.embedder.embed(q.sentence) for q in queries]
        self._check_dim(embeddings[0])
        for epoch in range(epochs):
            order = list(range(len(batch)))
            random.Random(derive_seed(self.seed, seed, "epoch", epoch)).shuffle(order)
            for index in order:
                item = batch[index]
                x = embeddings[index]
                target = item.target
                if target not in self.prototypes:
                    self.prototypes[target] = x.copy()
                else:
                    p = self.prototypes[target]
                    self.prototypes[target] = p + self.pull_rate * (x - p)
                wrong = item.instruction.wrong_prediction
                if (
                    item.weight_hint == CONTRASTIVE
                    and wrong is not None
                    and wrong != target
                    and wrong in self.prototypes
                ):
                    q = self.prototypes[wrong]
                    self.prototypes[wrong] = q - self.push_rate * (x - q)
        losses = [
            1.0 - cosine(x, self.prototypes[item.target])
            for item, x in zip(batch, embeddings)
        ]
        return TrainSummary(
            items_seen=epochs * len(batch),
            loss=float(np.mean(losses)),
        )

    # -- checkpointing ------------------------------------------------------

    def _state_blob(self) -> dict:
        return {
            "prototypes": {
                r: self.prototypes[r].tolist() for r in sorted(self.prototypes)
            },
            "pull_rate": self.pull_rate,
            "push_rate": self.push_rate,
            "seed": self.seed,
        }

    def checkpoint(self) -> str:
        blob = self._state_blob()
        encoded = json.dumps(blob, sort_keys=True)
        checkpoint_id = hashlib.sha256(encoded.encode("utf-8")).hexdigest()
        self._snapshots[checkpoint_id] = blob
        return checkpoint_id

    def restore(self, checkpoint_id: str) -> None:
        blob = self._snapshots.get(checkpoint_id)
        if blob is None:
            raise KeyError(f"unknown checkpoint {checkpoint_id!r}")
        self.prototypes = {
            r: np.asarray(v, dtype=np.float64)
            for r, v in blob["prototypes"].items()
        }
        self.pull_rate = blob["pull_rate"]
        self.push_rate = blob["push_rate"]
        self.seed = blob["seed"]


class RemoteBackend(ModelBackend):
    """Client speaking the training-service wire protocol.

    Train requests carry a deterministic request id (a content hash) so a
    retried POST after a dropped response is idempotent server-side.
    """

    def __init__(
        self,
        base_url: str,
        token_env: Optional[str] = None,
        client: Optional[ServiceClient] = None,
    ):
        self._client = client or ServiceClient(base_url, token_env=token_env)
        self.identity = f"remote:{self._client.base_url}"

    def infer(self, instruction: InstructionRecord) -> str:
        reply = self._client.post(
            "/infer", {"instruction_text": instruction.text}
        )
        return reply["response_text"]

    def train(
        self,
        batch: Sequence[TrainBatchItem],
        epochs: int,
        learning_rate: float,
        batch_size: int,
        seed: int,
    ) -> TrainSummary:
        if not batch:
            raise ValueError("training batch must be non-empty")
        payload = {
            "items": [
                {
                    "instruction_text": item.instruction.text,
                    "target": item.target,
                    "weight_hint": item.weight_hint,
                }
                for item in batch
            ],
            "epochs": epochs,
            "learning_rate": learning_rate,
            "batch_size": batch_size,
            "seed": seed,
        }
        payload["request_id"] = hashlib.sha256(
            json.dumps(payload, sort_keys=True).encode("utf-8")
        ).hexdigest()
        reply = self._client.post("/train", payload)
        return TrainSummary(
            items_seen=int(reply["items_seen"]), loss=float(reply["loss"])
        )

    def checkpoint(self) -> str:
        return self._client.post("/checkpoint", {})["checkpoint_id"]

    def restore(self, checkpoint_id: str) -> None:
        self._client.post("/restore", {"checkpoint_id": checkpoint_id})
