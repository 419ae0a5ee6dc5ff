"""HTTP layer exposing the trainer engine over the model-backend wire protocol.

Endpoint semantics:

* The model is a single logical writer, so every endpoint that touches its
  weights (or its adapter on/off switches) shares one lock.
* At most one training job runs at a time.  A small admission queue of
  concurrent /train requests may wait for the lock; beyond that the service
  rejects with 429 rather than building unbounded backlog.
* Out-of-memory failures surface as 503 with a Retry-After header so clients
  can back off and retry instead of treating them as permanent errors.
* A retried /train carrying the same request_id returns the recorded reply
  without training again.
"""

from __future__ import annotations

import os
import threading
from contextlib import contextmanager
from typing import Iterator, Optional

from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from trainer_service.model import TrainerEngine
from trainer_service.wire import (
    AnalyzeRequest,
    AnalyzeResponse,
    CheckpointRequest,
    CheckpointResponse,
    EmbedRequest,
    EmbedResponse,
    InferRequest,
    InferResponse,
    RestoreRequest,
    RestoreResponse,
    TrainRequest,
    TrainResponse,
)

RETRY_AFTER_SECONDS = "5"


def _looks_like_oom(exc: RuntimeError) -> bool:
    message = str(exc).lower()
    return "memory" in message or "alloc" in message


@contextmanager
def _oom_to_503(activity: str) -> Iterator[None]:
    try:
        yield
    except MemoryError:
        raise HTTPException(
            503,
            f"out of memory during {activity}; retry later",
            headers={"Retry-After": RETRY_AFTER_SECONDS},
        )
    except RuntimeError as exc:
        if _looks_like_oom(exc):
            raise HTTPException(
                503,
                f"out of memory during {activity}; retry later",
                headers={"Retry-After": RETRY_AFTER_SECONDS},
            )
        raise


def build_trainer_app(
    engine: Optional[TrainerEngine] = None,
    token_env: Optional[str] = None,
    analyst_enabled: bool = True,
    queue_capacity: int = 2,
) -> FastAPI:
    """Build the FastAPI app around a trainer engine.

    ``token_env`` names an environment variable; when that variable is set at
    request time, callers must present its value as a bearer token.
    ``queue_capacity`` bounds how many /train requests may be admitted at
    once (one running plus the rest waiting); extra requests get 429.
    """
    engine = engine if engine is not None else TrainerEngine()
    app = FastAPI(title="llm trainer service")
    lock = threading.Lock()
    train_slots = threading.BoundedSemaphore(queue_capacity)
    train_replies: dict[str, TrainResponse] = {}
    app.state.engine = engine
    app.state.train_slots = train_slots

    def require_token(request: Request) -> None:
        expected = os.environ.get(token_env, "") if token_env else ""
        if not expected:
            return
        scheme, _, param = request.headers.get("Authorization", "").partition(" ")
        if scheme.lower() != "bearer" or param.strip() != expected:
            raise HTTPException(401, "missing or invalid bearer token")

    @app.exception_handler(RequestValidationError)
    async def _validation_error(
        request: Request, exc: RequestValidationError
    ) -> JSONResponse:
        fields = sorted(
            {
                ".".join(str(part) for part in err["loc"] if part != "body")
                for err in exc.errors()
            }
        )
        return JSONResponse(
            {"detail": f"malformed body: {', '.join(fields) or 'body'}"},
            status_code=400,
        )

    guarded = [Depends(require_token)]

    @app.get("/healthz", dependencies=guarded)
    def healthz() -> dict:
        return {"status": "ok", **engine.describe()}

    @app.post("/infer", response_model=InferResponse, dependencies=guarded)
    def infer(body: InferRequest) -> InferResponse:
        with lock, _oom_to_503("inference"):
            return InferResponse(response_text=engine.generate(body.instruction_text))

    @app.post("/train", response_model=TrainResponse, dependencies=guarded)
    def train(body: TrainRequest) -> TrainResponse:
        if body.request_id is not None and body.request_id in train_replies:
            return train_replies[body.request_id]
        if not train_slots.acquire(blocking=False):
            raise HTTPException(
                429,
                "training queue is full; retry later",
                headers={"Retry-After": RETRY_AFTER_SECONDS},
            )
        try:
            # weight_hint records how the engine built each instruction; the
            # trainer accepts it for protocol fidelity but weights all items
            # equally in the loss.
            pairs = [(item.instruction_text, item.target) for item in body.items]
            with lock, _oom_to_503("training"):
                items_seen, loss = engine.train(
                    pairs,
                    epochs=body.epochs,
                    learning_rate=body.learning_rate,
                    batch_size=body.batch_size,
                    seed=body.seed,
                )
                reply = TrainResponse(items_seen=items_seen, loss=loss)
                if body.request_id is not None:
                    train_replies[body.request_id] = reply
        finally:
            train_slots.release()
        return reply

    @app.post("/checkpoint", response_model=CheckpointResponse, dependencies=guarded)
    def checkpoint(body: CheckpointRequest) -> CheckpointResponse:
        with lock:
            return CheckpointResponse(checkpoint_id=engine.checkpoint())

    @app.post("/restore", response_model=RestoreResponse, dependencies=guarded)
    def restore(body: RestoreRequest) -> RestoreResponse:
        with lock:
            try:
                engine.restore(body.checkpoint_id)
            except KeyError:
                raise HTTPException(404, f"unknown checkpoint {body.checkpoint_id!r}")
        return RestoreResponse()

    @app.post("/embed", response_model=EmbedResponse, dependencies=guarded)
    def embed(body: EmbedRequest) -> EmbedResponse:
        # Embeddings come from the frozen base network (adapters switched
        # off), so the reply depends only on the texts; the lock just keeps
        # the switch flip atomic with respect to concurrent inference.
        with lock, _oom_to_503("embedding"):
            vectors = engine.embed(body.texts)
        return EmbedResponse(vectors=[vector.tolist() for vector in vectors])

    @app.post("/analyze", response_model=AnalyzeResponse, dependencies=guarded)
    def analyze(body: AnalyzeRequest) -> AnalyzeResponse:
        if not analyst_enabled:
            raise HTTPException(404, "no analyst is configured on this service")
        with lock, _oom_to_503("analysis"):
            return AnalyzeResponse(response_text=engine.analyze(body.prompt_text))

    return app
