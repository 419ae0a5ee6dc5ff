import numpy as np
import pytest
from fastapi.testclient import TestClient

from conftest import small_engine
from trainer_service.service import build_trainer_app

TRAIN_BODY = {
    "items": [
        {
            "instruction_text": "first instruction text",
            "target": "alpha relation",
            "weight_hint": "simple",
        },
        {
            "instruction_text": "second instruction text",
            "target": "beta relation",
            "weight_hint": "contrastive",
        },
    ],
    "epochs": 2,
    "learning_rate": 0.001,
    "batch_size": 2,
    "seed": 17,
}


@pytest.fixture
def service():
    engine = small_engine()
    app = build_trainer_app(engine)
    with TestClient(app) as client:
        yield engine, app, client


def test_healthz_reports_service_state(service):
    _, _, client = service
    reply = client.get("/healthz")
    assert reply.status_code == 200
    body = reply.json()
    assert body["status"] == "ok"
    assert body["base_model_id"].startswith("byte-gpt2")
    assert body["encoder_model_id"].endswith("meanpool")
    assert body["generation"]["strategy"] == "greedy"
    assert body["adapters"]["parameters"] > 0


def test_infer_is_deterministic_and_nonempty(service):
    _, _, client = service
    body = {"instruction_text": "pick the relation for this sentence"}
    first = client.post("/infer", json=body)
    second = client.post("/infer", json=body)
    assert first.status_code == 200
    assert first.json()["response_text"]
    assert first.json() == second.json()


def test_malformed_infer_names_the_field(service):
    _, _, client = service
    reply = client.post("/infer", json={})
    assert reply.status_code == 400
    assert reply.json()["detail"] == "malformed body: instruction_text"


def test_train_echoes_items_seen_and_loss(service):
    _, _, client = service
    reply = client.post("/train", json=TRAIN_BODY)
    assert reply.status_code == 200
    body = reply.json()
    assert body["items_seen"] == 4  # 2 epochs over 2 items
    assert isinstance(body["loss"], float) and body["loss"] > 0


@pytest.mark.parametrize(
    "mutation, field",
    [
        ({"items": []}, "items"),
        ({"epochs": 0}, "epochs"),
        ({"learning_rate": 0.0}, "learning_rate"),
        ({"batch_size": 0}, "batch_size"),
        (
            {"items": [{"instruction_text": "x", "target": "y", "weight_hint": "banana"}]},
            "weight_hint",
        ),
    ],
)
def test_malformed_train_names_the_offending_field(service, mutation, field):
    _, _, client = service
    body = dict(TRAIN_BODY, **mutation)
    reply = client.post("/train", json=body)
    assert reply.status_code == 400
    detail = reply.json()["detail"]
    assert detail.startswith("malformed body:")
    assert field in detail


def test_train_request_id_replay_does_not_retrain(service):
    engine, _, client = service
    body = dict(TRAIN_BODY, request_id="batch-0001")
    first = client.post("/train", json=body)
    fingerprint = engine.state_fingerprint()
    replay = client.post("/train", json=body)
    assert replay.status_code == 200
    assert replay.json() == first.json()
    assert engine.state_fingerprint() == fingerprint


def test_checkpoint_restore_roundtrip_over_the_wire(service):
    engine, _, client = service
    saved = client.post("/checkpoint", json={}).json()["checkpoint_id"]
    client.post("/train", json=TRAIN_BODY)
    assert engine.state_fingerprint() != saved
    reply = client.post("/restore", json={"checkpoint_id": saved})
    assert reply.status_code == 200
    assert engine.state_fingerprint() == saved


def test_restore_unknown_checkpoint_is_404(service):
    _, _, client = service
    reply = client.post("/restore", json={"checkpoint_id": "missing"})
    assert reply.status_code == 404
    assert "missing" in reply.json()["detail"]


def test_embed_returns_one_vector_per_text(service):
    _, _, client = service
    reply = client.post("/embed", json={"texts": ["one text", "two text", "one text"]})
    assert reply.status_code == 200
    vectors = reply.json()["vectors"]
    assert len(vectors) == 3
    assert len({len(v) for v in vectors}) == 1
    assert vectors[0] == vectors[2]


def test_embed_is_stable_across_training(service):
    _, _, client = service
    before = client.post("/embed", json={"texts": ["stable text"]}).json()["vectors"]
    client.post("/train", json=TRAIN_BODY)
    after = client.post("/embed", json={"texts": ["stable text"]}).json()["vectors"]
    assert np.allclose(before, after)


def test_analyze_returns_text_and_can_be_disabled():
    engine = small_engine()
    with TestClient(build_trainer_app(engine)) as client:
        reply = client.post("/analyze", json={"prompt_text": "why was this wrong?"})
        assert reply.status_code == 200
        assert reply.json()["response_text"]
    with TestClient(build_trainer_app(engine, analyst_enabled=False)) as client:
        reply = client.post("/analyze", json={"prompt_text": "why was this wrong?"})
        assert reply.status_code == 404


def test_full_training_queue_rejects_with_429(service):
    _, app, client = service
    slots = app.state.train_slots
    assert slots.acquire(blocking=False)
    try:
        assert slots.acquire(blocking=False)  # default capacity is 2
        try:
            reply = client.post("/train", json=TRAIN_BODY)
            assert reply.status_code == 429
            assert reply.headers["Retry-After"]
            assert "queue" in reply.json()["detail"]
        finally:
            slots.release()
    finally:
        slots.release()
    assert client.post("/train", json=TRAIN_BODY).status_code == 200


def test_out_of_memory_maps_to_503_with_retry_after(service, monkeypatch):
    engine, _, client = service

    def explode(*args, **kwargs):
        raise MemoryError("cannot allocate")

    monkeypatch.setattr(engine, "train", explode)
    reply = client.post("/train", json=TRAIN_BODY)
    assert reply.status_code == 503
    assert reply.headers["Retry-After"] == "5"
    assert "retry" in reply.json()["detail"]

    def explode_runtime(*args, **kwargs):
        raise RuntimeError("CUDA out of memory. Tried to allocate 2.00 GiB")

    monkeypatch.setattr(engine, "train", explode_runtime)
    assert client.post("/train", json=TRAIN_BODY).status_code == 503


def test_unrelated_runtime_errors_are_not_masked_as_oom(monkeypatch):
    engine = small_engine()
    app = build_trainer_app(engine)

    def explode(*args, **kwargs):
        raise RuntimeError("tensor shape mismatch")

    monkeypatch.setattr(engine, "train", explode)
    with TestClient(app, raise_server_exceptions=False) as client:
        assert client.post("/train", json=TRAIN_BODY).status_code == 500


def test_bearer_token_enforced_when_configured(monkeypatch):
    app = build_trainer_app(small_engine(), token_env="TRAINER_SERVICE_TOKEN")
    with TestClient(app) as client:
        body = {"instruction_text": "open access until the variable is set"}
        assert client.post("/infer", json=body).status_code == 200

        monkeypatch.setenv("TRAINER_SERVICE_TOKEN", "sesame")
        assert client.post("/infer", json=body).status_code == 401
        wrong = {"Authorization": "Bearer wrong"}
        assert client.post("/infer", json=body, headers=wrong).status_code == 401
        right = {"Authorization": "Bearer sesame"}
        assert client.post("/infer", json=body, headers=right).status_code == 200
        assert client.get("/healthz", headers=right).status_code == 200
