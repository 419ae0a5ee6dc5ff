"""Wire protocol for the model-backend service boundary.

Six JSON-over-HTTP endpoints make up the contract between the engine and
any training service:

- ``POST /infer``      {instruction_text} -> {response_text}
- ``POST /train``      {items, epochs, learning_rate, batch_size, seed[, request_id]}
                       -> {items_seen, loss}
- ``POST /checkpoint`` {} -> {checkpoint_id}
- ``POST /restore``    {checkpoint_id} -> {}
- ``POST /embed``      {texts} -> {vectors}
- ``POST /analyze``    {prompt_text} -> {response_text}

This module holds the request/response models, a reference ASGI app that
serves the protocol on top of any in-process ``ModelBackend``, and a
conformance suite that any implementation (the reference app or an
external training service) must pass.
"""

from __future__ import annotations

import json
import os
import threading
from typing import Callable, List, Literal, Optional, Sequence, Tuple

import httpx
from fastapi import Depends, FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from .backend import ModelBackend, TrainBatchItem
from .corpus import Entity, Sample
from .embedding import Embedder, HashingEmbedder
from .instructions import (
    CONTRASTIVE,
    SIMPLE,
    InstructionRecord,
    build_simple,
    parse_instruction_query,
)

DEFAULT_TOKEN_ENV = "CREX_BACKEND_TOKEN"


# --- Message models ----------------------------------------------------------


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


REQUEST_MODELS = {
    "/infer": InferRequest,
    "/train": TrainRequest,
    "/checkpoint": CheckpointRequest,
    "/restore": RestoreRequest,
    "/embed": EmbedRequest,
    "/analyze": AnalyzeRequest,
}
RESPONSE_MODELS = {
    "/infer": InferResponse,
    "/train": TrainResponse,
    "/checkpoint": CheckpointResponse,
    "/restore": RestoreResponse,
    "/embed": EmbedResponse,
    "/analyze": AnalyzeResponse,
}


# --- Reference service -------------------------------------------------------


def _record_from_wire(
    instruction_text: str, target: str, weight_hint: str
) -> InstructionRecord:
    """Rebuild the engine-side record a wire item describes.

    The wire format carries only text, target, and weight hint; the hard
    case's recorded wrong prediction stays engine-local, so the simulated
    push is inert behind the protocol. The candidate-list snapshot is
    recovered from the instruction text itself.
    """
    query = parse_instruction_query(instruction_text)
    if target not in query.relations:
        raise ValueError(
            f"target {target!r} is not in the instruction's candidate list"
        )
    return InstructionRecord(
        kind=weight_hint,
        text=instruction_text,
        target=target,
        sample_id="",
        relation_list_snapshot=tuple(query.relations),
    )


def build_backend_app(
    backend: ModelBackend,
    embedder: Optional[Embedder] = None,
    analyst_fn: Optional[Callable[[str], str]] = None,
    token_env: Optional[str] = None,
) -> FastAPI:
    """Serve a ``ModelBackend`` (plus embedder and analyst) over the protocol.

    ``token_env`` names an environment variable; when that variable is set
    at request time, callers must present it as a bearer token. The backend
    is a single logical writer, so mutating calls share one lock.
    """
    embedder = embedder if embedder is not None else HashingEmbedder()
    app = FastAPI(title="model backend service")
    lock = threading.Lock()
    train_replies: dict[str, TrainResponse] = {}

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

    @app.post("/infer", response_model=InferResponse, dependencies=guarded)
    def infer(body: InferRequest) -> InferResponse:
        record = InstructionRecord(
            kind=SIMPLE,
            text=body.instruction_text,
            target="",
            sample_id="",
            relation_list_snapshot=(),
        )
        with lock:
            return InferResponse(response_text=backend.infer(record))

    @app.post("/train", response_model=TrainResponse, dependencies=guarded)
    def train(body: TrainRequest) -> TrainResponse:
        if body.request_id is not None and body.request_id in train_replies:
            return train_replies[body.request_id]
        try:
            batch = [
                TrainBatchItem(
                    instruction=_record_from_wire(
                        item.instruction_text, item.target, item.weight_hint
                    ),
                    target=item.target,
                    weight_hint=item.weight_hint,
                )
                for item in body.items
            ]
        except ValueError as exc:
            raise HTTPException(400, f"malformed body: items: {exc}")
        with lock:
            summary = backend.train(
                batch,
                epochs=body.epochs,
                learning_rate=body.learning_rate,
                batch_size=body.batch_size,
                seed=body.seed,
            )
            reply = TrainResponse(items_seen=summary.items_seen, loss=summary.loss)
            if body.request_id is not None:
                train_replies[body.request_id] = reply
        return reply

    @app.post("/checkpoint", response_model=CheckpointResponse, dependencies=guarded)
    def checkpoint(body: CheckpointRequest) -> CheckpointResponse:
        with lock:
            return CheckpointResponse(checkpoint_id=backend.checkpoint())

    @app.post("/restore", response_model=RestoreResponse, dependencies=guarded)
    def restore(body: RestoreRequest) -> RestoreResponse:
        with lock:
            try:
                backend.restore(body.checkpoint_id)
            except KeyError:
                raise HTTPException(
                    404, f"unknown checkpoint {body.checkpoint_id!r}"
                )
        return RestoreResponse()

    @app.post("/embed", response_model=EmbedResponse, dependencies=guarded)
    def embed(body: EmbedRequest) -> EmbedResponse:
        vectors = embedder.embed_many(body.texts)
        return EmbedResponse(vectors=[v.tolist() for v in vectors])

    @app.post("/analyze", response_model=AnalyzeResponse, dependencies=guarded)
    def analyze(body: AnalyzeRequest) -> AnalyzeResponse:
        if analyst_fn is None:
            raise HTTPException(404, "no analyst is configured on this service")
        return AnalyzeResponse(response_text=analyst_fn(body.prompt_text))

    return app


class ASGIBridgeTransport(httpx.BaseTransport):
    """Sync httpx transport that drives an ASGI app in-process.

    httpx ships an async-only ASGI transport; this wrapper lets synchronous
    clients (the engine's ``ServiceClient``, the conformance suite) talk to
    an app without opening a socket.
    """

    def __init__(self, app):
        self._transport = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        import asyncio

        request.read()

        async def _dispatch() -> httpx.Response:
            response = await self._transport.handle_async_request(request)
            await response.aread()
            return response

        # Rebuilt so the body rides a synchronous stream, which is what a
        # sync client requires of its transport.
        response = asyncio.run(_dispatch())
        return httpx.Response(
            status_code=response.status_code,
            headers=response.headers,
            content=response.content,
        )


def in_process_client(app, headers: Optional[dict] = None) -> httpx.Client:
    """An httpx client bound to an ASGI app, no network involved."""
    return httpx.Client(
        transport=ASGIBridgeTransport(app),
        base_url="http://in-process",
        headers=headers or {},
    )


# --- Conformance suite -------------------------------------------------------
#
# Transport-agnostic checks driven through an httpx.Client (works with a
# live server or an in-process ASGI transport). An implementation passes
# when every check returns without raising.

PROBE_RELATIONS = ("alpha relation", "beta relation")


def probe_instructions(count: int = 20) -> List[Tuple[str, str]]:
    """Deterministic (instruction_text, target) probes for conformance runs."""
    probes = []
    for i in range(count):
        relation = PROBE_RELATIONS[i % len(PROBE_RELATIONS)]
        sample = Sample(
            id=f"probe-{i:03d}",
            sentence=f"probe sentence number {i} mentions topic {relation.split()[0]}",
            head=Entity(text=f"head entity {i}"),
            tail=Entity(text=f"tail entity {i}"),
            relation=relation,
        )
        record = build_simple(sample, PROBE_RELATIONS)
        probes.append((record.text, record.target))
    return probes


def check_message_roundtrip() -> None:
    """Serialized requests and responses parse back structurally equal."""
    probe_text = probe_instructions(1)[0][0]
    messages = [
        InferRequest(instruction_text=probe_text),
        InferResponse(response_text='{"relation": "alpha relation"}'),
        TrainRequest(
            items=[
                TrainItem(
                    instruction_text=probe_text,
                    target="alpha relation",
                    weight_hint=SIMPLE,
                ),
                TrainItem(
                    instruction_text=probe_text,
                    target="beta relation",
                    weight_hint=CONTRASTIVE,
                ),
            ],
            epochs=2,
            learning_rate=3e-5,
            batch_size=32,
            seed=11,
            request_id="abc123",
        ),
        TrainResponse(items_seen=4, loss=0.25),
        CheckpointRequest(),
        CheckpointResponse(checkpoint_id="deadbeef"),
        RestoreRequest(checkpoint_id="deadbeef"),
        RestoreResponse(),
        EmbedRequest(texts=["one", "two"]),
        EmbedResponse(vectors=[[0.0, 1.0], [1.0, 0.0]]),
        AnalyzeRequest(prompt_text="why"),
        AnalyzeResponse(response_text="because"),
    ]
    for message in messages:
        encoded = message.model_dump_json()
        decoded = type(message).model_validate(json.loads(encoded))
        assert decoded == message, f"round-trip changed {type(message).__name__}"


def _post(client: httpx.Client, path: str, payload: dict) -> dict:
    response = client.post(path, json=payload)
    assert response.status_code == 200, (
        f"POST {path} -> {response.status_code}: {response.text[:200]}"
    )
    return response.json()


def _train_payload(
    probes: Sequence[Tuple[str, str]],
    epochs: int = 2,
    learning_rate: float = 3e-5,
    batch_size: int = 32,
    seed: int = 11,
) -> dict:
    return {
        "items": [
            {"instruction_text": text, "target": target, "weight_hint": SIMPLE}
            for text, target in probes
        ],
        "epochs": epochs,
        "learning_rate": learning_rate,
        "batch_size": batch_size,
        "seed": seed,
    }


def check_infer_endpoint(client: httpx.Client) -> None:
    """Every probe yields a non-empty response string."""
    for text, _ in probe_instructions(4):
        reply = _post(client, "/infer", {"instruction_text": text})
        assert isinstance(reply.get("response_text"), str), reply
        assert reply["response_text"], "empty inference response"


def check_train_echo(client: httpx.Client) -> None:
    """The engine's default hyperparameters pass through unmodified."""
    probes = probe_instructions(6)
    reply = _post(client, "/train", _train_payload(probes))
    assert reply["items_seen"] == 2 * len(probes), (
        f"epochs=2 over {len(probes)} items should see {2 * len(probes)}, "
        f"got {reply['items_seen']}"
    )
    assert isinstance(reply["loss"], float), reply


def check_checkpoint_restore(client: httpx.Client, probe_count: int = 20) -> None:
    """Restoring a checkpoint restores extensional behavior on probes."""
    probes = probe_instructions(probe_count)
    # Give every probe relation a trained state first.
    _post(client, "/train", _train_payload(probes, seed=17))
    before = [
        _post(client, "/infer", {"instruction_text": text})["response_text"]
        for text, _ in probes
    ]
    saved = _post(client, "/checkpoint", {})["checkpoint_id"]
    assert saved, "empty checkpoint id"

    # Perturb the model, then roll back.
    half = probes[: max(1, probe_count // 2)]
    _post(client, "/train", _train_payload(half, epochs=3, seed=23))
    _post(client, "/restore", {"checkpoint_id": saved})
    after = [
        _post(client, "/infer", {"instruction_text": text})["response_text"]
        for text, _ in probes
    ]
    assert after == before, "responses changed across checkpoint/restore"

    resaved = _post(client, "/checkpoint", {})["checkpoint_id"]
    assert resaved == saved, "content-addressed id changed for identical state"

    missing = client.post("/restore", json={"checkpoint_id": "no-such-id"})
    assert missing.status_code in (400, 404), (
        f"unknown checkpoint should fail, got {missing.status_code}"
    )


def check_embed_endpoint(client: httpx.Client) -> None:
    """Same text embeds to the same vector; shapes are consistent."""
    texts = ["the first probe text", "a second probe text", "the first probe text"]
    reply = _post(client, "/embed", {"texts": texts})
    vectors = reply["vectors"]
    assert len(vectors) == len(texts), "one vector per text"
    dims = {len(v) for v in vectors}
    assert len(dims) == 1, f"inconsistent vector dimensions {dims}"
    assert vectors[0] == vectors[2], "identical texts must embed identically"


def check_train_idempotency(client: httpx.Client) -> None:
    """Replaying a train request id neither retrains nor changes the reply."""
    probes = probe_instructions(4)
    payload = _train_payload(probes, seed=29)
    payload["request_id"] = "conformance-idempotency-probe"
    first = _post(client, "/train", payload)
    state_after_first = _post(client, "/checkpoint", {})["checkpoint_id"]
    second = _post(client, "/train", payload)
    state_after_second = _post(client, "/checkpoint", {})["checkpoint_id"]
    assert second == first, "retried train returned a different summary"
    assert state_after_second == state_after_first, (
        "retried train with the same request id mutated state"
    )


def check_malformed_train(client: httpx.Client) -> None:
    """A body missing a required field fails with 400 naming the field."""
    response = client.post(
        "/train", json={"items": [], "epochs": 0}
    )
    assert response.status_code in (400, 422), (
        f"malformed body should fail, got {response.status_code}"
    )


CONFORMANCE_CHECKS: List[Callable] = [
    check_infer_endpoint,
    check_train_echo,
    check_checkpoint_restore,
    check_embed_endpoint,
    check_train_idempotency,
    check_malformed_train,
]


def run_conformance_suite(client: httpx.Client) -> List[str]:
    """Run every protocol check; returns their names, raises on failure."""
    check_message_roundtrip()
    passed = ["check_message_roundtrip"]
    for check in CONFORMANCE_CHECKS:
        check(client)
        passed.append(check.__name__)
    return passed
