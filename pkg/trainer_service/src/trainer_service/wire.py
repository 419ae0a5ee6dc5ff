"""Request and response bodies for the model-backend wire protocol.

These mirror the protocol spoken by the relation-extraction engine's remote
backend client: six POST endpoints, JSON bodies, field names as given here.
The trainer service keeps its own copies so the package stands alone; any
drift from the engine's models is caught by the protocol conformance suite.
"""

from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, Field


class InferRequest(BaseModel):
    instruction_text: str = Field(min_length=1)


class InferResponse(BaseModel):
    response_text: str


class TrainItem(BaseModel):
    instruction_text: str = Field(min_length=1)
    target: str = Field(min_length=1)
    weight_hint: Literal["simple", "contrastive"]


class TrainRequest(BaseModel):
    items: List[TrainItem] = Field(min_length=1)
    epochs: int = Field(ge=1)
    learning_rate: float = Field(gt=0)
    batch_size: int = Field(ge=1)
    seed: int
    # Content hash supplied by the client; a retried POST with the same id
    # must not train twice.
    request_id: Optional[str] = None


class TrainResponse(BaseModel):
    items_seen: int
    loss: float


class CheckpointRequest(BaseModel):
    pass


class CheckpointResponse(BaseModel):
    checkpoint_id: str


class RestoreRequest(BaseModel):
    checkpoint_id: str = Field(min_length=1)


class RestoreResponse(BaseModel):
    pass


class EmbedRequest(BaseModel):
    texts: List[str] = Field(min_length=1)


class EmbedResponse(BaseModel):
    vectors: List[List[float]]


class AnalyzeRequest(BaseModel):
    prompt_text: str = Field(min_length=1)


class AnalyzeResponse(BaseModel):
    response_text: str
