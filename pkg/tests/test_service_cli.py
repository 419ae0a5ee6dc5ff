"""Engine HTTP service and the command-line client built on it."""

import argparse
import hashlib
import json

import httpx
import pytest
import yaml

from crex.cli import (
    EXIT_FAILURE,
    EXIT_OK,
    EXIT_USAGE,
    CliError,
    build_run_config,
    main,
    make_client,
    parse_overrides,
)
from crex.protocol import in_process_client
from crex.service import build_engine_app


def tiny_config_dict(dataset_path, **overrides):
    data = dict(
        dataset_path=str(dataset_path),
        num_tasks=2,
        num_sequences=1,
        memory_size=2,
        train_cap=8,
        test_cap=2,
        embedding_dim=32,
        seed=9,
    )
    data.update(overrides)
    return data


@pytest.fixture()
def engine(tmp_path):
    app = build_engine_app(runs_root=tmp_path / "runs")
    with in_process_client(app) as client:
        yield app, client


@pytest.fixture()
def cli_config_path(tmp_path, toy_corpus_path):
    path = tmp_path / "run.yaml"
    path.write_text(
        yaml.safe_dump(tiny_config_dict(toy_corpus_path)), encoding="utf-8"
    )
    return path


# --- service: health and ingest --------------------------------------------------

def test_healthz(engine):
    _, client = engine
    reply = client.get("/healthz")
    assert reply.status_code == 200
    assert reply.json() == {"status": "ok"}


def test_ingest_normalizes_and_writes_manifest(engine, tmp_path, toy_corpus_path):
    _, client = engine
    out_path = tmp_path / "normalized" / "toy.jsonl"
    reply = client.post(
        "/ingest",
        json={"dataset_path": str(toy_corpus_path), "out_path": str(out_path)},
    )
    assert reply.status_code == 200
    body = reply.json()
    assert body["num_samples"] == 180
    assert body["num_relations"] == 6
    assert body["out_path"] == str(out_path)
    assert out_path.exists()
    assert body["sha256"] == hashlib.sha256(out_path.read_bytes()).hexdigest()

    manifest = json.loads((tmp_path / "normalized" / "toy.jsonl.manifest.json").read_text())
    assert manifest["sha256"] == body["sha256"]
    assert manifest["num_samples"] == 180
    assert sorted(manifest["relations"]) == body["relations"]
    assert sum(manifest["relations"].values()) == 180


def test_ingest_drops_unlabeled_records_in_tacred_mode(engine, tmp_path, toy_corpus_path):
    _, client = engine
    record = json.loads(toy_corpus_path.read_text().splitlines()[0])
    record["id"] = "norel-1"
    record["relation"] = "no_relation"
    raw = tmp_path / "with-norel.jsonl"
    raw.write_text(
        toy_corpus_path.read_text() + json.dumps(record) + "\n", encoding="utf-8"
    )
    reply = client.post(
        "/ingest",
        json={"dataset_path": str(raw), "out_path": str(tmp_path / "clean.jsonl")},
    )
    assert reply.status_code == 200
    assert reply.json()["num_samples"] == 180
    assert len(reply.json()["relations"]) == 6


def test_ingest_missing_dataset_rejected(engine, tmp_path):
    _, client = engine
    reply = client.post(
        "/ingest",
        json={
            "dataset_path": str(tmp_path / "nope.jsonl"),
            "out_path": str(tmp_path / "out.jsonl"),
        },
    )
    assert reply.status_code == 400
    assert reply.json()["detail"].startswith("dataset_path:")


def test_malformed_body_names_missing_fields(engine):
    _, client = engine
    reply = client.post("/ingest", json={})
    assert reply.status_code == 400
    assert reply.json()["detail"] == "malformed body: dataset_path, out_path"

    reply = client.post("/runs", json={"config": {}})
    assert reply.status_code == 400
    assert reply.json()["detail"] == "malformed body: config.dataset_path"


# --- service: runs, jobs, ablation ------------------------------------------------

def test_run_job_completes_and_reports_result(engine, tmp_path, toy_corpus_path):
    _, client = engine
    out_dir = tmp_path / "run"
    reply = client.post(
        "/runs",
        json={"config": tiny_config_dict(toy_corpus_path), "out_dir": str(out_dir)},
    )
    assert reply.status_code == 200
    job = reply.json()
    assert job["status"] == "done"
    assert job["kind"] == "run"
    assert job["out_dir"] == str(out_dir)
    result = job["result"]
    assert result["aggregate"]["num_sequences"] == 1
    assert len(result["aggregate"]["mean_by_task"]) == 2
    assert len(result["accuracy_by_sequence"]) == 1
    for accuracies in result["accuracy_by_sequence"].values():
        assert len(accuracies) == 2
    assert (out_dir / "table.txt").exists()

    status = client.get(f"/runs/{job['job_id']}")
    assert status.status_code == 200
    assert status.json()["status"] == "done"


def test_run_job_without_wait_can_be_polled(engine, tmp_path, toy_corpus_path):
    app, client = engine
    reply = client.post(
        "/runs",
        json={
            "config": tiny_config_dict(toy_corpus_path),
            "out_dir": str(tmp_path / "bg"),
            "wait": False,
        },
    )
    assert reply.status_code == 200
    job = reply.json()
    assert job["status"] in {"running", "done"}
    app.state.jobs.join(job["job_id"], timeout=60)
    final = client.get(f"/runs/{job['job_id']}").json()
    assert final["status"] == "done"


def test_run_job_failure_is_recorded_on_the_job(engine, tmp_path):
    _, client = engine
    reply = client.post(
        "/runs",
        json={
            "config": tiny_config_dict(tmp_path / "missing.jsonl"),
            "out_dir": str(tmp_path / "doomed"),
        },
    )
    assert reply.status_code == 200
    job = reply.json()
    assert job["status"] == "failed"
    assert "missing.jsonl" in job["error"]


def test_remote_backend_requires_url(engine, tmp_path, toy_corpus_path):
    _, client = engine
    reply = client.post(
        "/runs",
        json={
            "config": tiny_config_dict(toy_corpus_path, backend="remote"),
            "out_dir": str(tmp_path / "r"),
        },
    )
    assert reply.status_code == 400
    assert reply.json()["detail"] == (
        "config.backend_url: required when backend is 'remote' "
        "(set it to the training service URL)"
    )


def test_remote_analyst_requires_url(engine, tmp_path, toy_corpus_path):
    _, client = engine
    reply = client.post(
        "/runs",
        json={
            "config": tiny_config_dict(toy_corpus_path, analyst_mode="remote"),
            "out_dir": str(tmp_path / "r"),
        },
    )
    assert reply.status_code == 400
    assert reply.json()["detail"].startswith("config.analyst_url:")


def test_ablate_rejects_unknown_flags_eagerly(engine, tmp_path, toy_corpus_path):
    _, client = engine
    reply = client.post(
        "/ablate",
        json={
            "config": tiny_config_dict(toy_corpus_path),
            "out_dir": str(tmp_path / "a"),
            "flags": ["no_positive", "bogus"],
        },
    )
    assert reply.status_code == 400
    detail = reply.json()["detail"]
    assert "bogus" in detail
    assert "no_hard_split" in detail
    assert not (tmp_path / "a").exists()


def test_unknown_job_is_404(engine):
    _, client = engine
    reply = client.get("/runs/run-9999")
    assert reply.status_code == 404
    assert "run-9999" in reply.json()["detail"]


def test_report_unknown_dir_is_404(engine, tmp_path):
    _, client = engine
    reply = client.post("/report", json={"run_dir": str(tmp_path / "nowhere")})
    assert reply.status_code == 404
    assert reply.json()["detail"].startswith("run_dir:")


def test_replay_requires_stored_config(engine, tmp_path):
    _, client = engine
    empty = tmp_path / "empty"
    empty.mkdir()
    reply = client.post("/replay", json={"run_dir": str(empty)})
    assert reply.status_code == 404
    assert "no config.json" in reply.json()["detail"]


def test_service_run_report_replay_roundtrip(engine, tmp_path, toy_corpus_path):
    _, client = engine
    out_dir = tmp_path / "run"
    job = client.post(
        "/runs",
        json={"config": tiny_config_dict(toy_corpus_path), "out_dir": str(out_dir)},
    ).json()
    assert job["status"] == "done"

    report = client.post("/report", json={"run_dir": str(out_dir)})
    assert report.status_code == 200
    assert report.json()["table"] == (out_dir / "table.txt").read_text(encoding="utf-8")

    replay = client.post("/replay", json={"run_dir": str(out_dir)})
    assert replay.status_code == 200
    body = replay.json()
    assert body["ok"] is True
    assert len(body["messages"]) == 1


# --- CLI: config assembly ---------------------------------------------------------

def _config_args(**overrides):
    base = dict(
        config=None,
        data=None,
        seed=None,
        memory_size=None,
        kp=None,
        kn=None,
        backend=None,
        set=None,
    )
    base.update(overrides)
    return argparse.Namespace(**base)


def test_run_config_precedence(tmp_path, toy_corpus_path):
    cfg = tmp_path / "base.json"
    cfg.write_text(
        json.dumps(
            {
                "dataset_path": "from-file.jsonl",
                "seed": 1,
                "k_p": 2,
                "memory_size": 9,
            }
        ),
        encoding="utf-8",
    )
    args = _config_args(
        config=str(cfg),
        data=str(toy_corpus_path),
        seed=3,
        kn=4,
        set=["seed=12", "k_p=5"],
    )
    config = build_run_config(args)
    assert config.dataset_path == str(toy_corpus_path)  # --data beats the file
    assert config.seed == 12  # --set beats the named flag
    assert config.k_p == 5  # --set beats the file
    assert config.k_n == 4  # named flag applies
    assert config.memory_size == 9  # file value survives unset flags


def test_parse_overrides_decodes_json_values():
    out = parse_overrides(
        ["memory_size=4", "no_positive=true", "note=plain text", "url={not json"]
    )
    assert out == {
        "memory_size": 4,
        "no_positive": True,
        "note": "plain text",
        "url": "{not json",
    }


def test_parse_overrides_rejects_missing_separator():
    with pytest.raises(CliError) as excinfo:
        parse_overrides(["oops"])
    assert excinfo.value.code == EXIT_USAGE


def test_invalid_config_field_names_the_field(toy_corpus_path):
    args = _config_args(data=str(toy_corpus_path), set=["train_cap=0"])
    with pytest.raises(CliError) as excinfo:
        build_run_config(args)
    assert excinfo.value.code == EXIT_USAGE
    assert "train_cap" in str(excinfo.value)


def test_config_file_must_hold_a_mapping(tmp_path):
    bad = tmp_path / "list.yaml"
    bad.write_text("- just\n- a\n- list\n", encoding="utf-8")
    with pytest.raises(CliError) as excinfo:
        build_run_config(_config_args(config=str(bad)))
    assert excinfo.value.code == EXIT_USAGE
    assert "mapping" in str(excinfo.value)


def test_make_client_targets_named_server():
    client = make_client(argparse.Namespace(server="http://engine:8400/", runs_root="runs"))
    try:
        assert isinstance(client, httpx.Client)
        assert str(client.base_url).rstrip("/") == "http://engine:8400"
    finally:
        client.close()


# --- CLI: subcommands end to end --------------------------------------------------

def test_cli_synth_writes_corpus(tmp_path, capsys):
    out = tmp_path / "toy.jsonl"
    assert main(["synth", "--out", str(out), "--kind", "toy", "--seed", "5"]) == EXIT_OK
    assert out.exists()
    assert "wrote 180 samples, 6 relations" in capsys.readouterr().out


def test_cli_synth_benchmark_kind(tmp_path, capsys):
    out = tmp_path / "bench.jsonl"
    assert main(["synth", "--out", str(out), "--kind", "benchmark"]) == EXIT_OK
    assert "12 relations" in capsys.readouterr().out


def test_cli_ingest(tmp_path, toy_corpus_path, capsys):
    out = tmp_path / "norm.jsonl"
    code = main(["ingest", "--data", str(toy_corpus_path), "--out", str(out)])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "normalized 180 samples over 6 relations" in printed
    assert "manifest:" in printed
    assert out.exists()


def test_cli_ingest_missing_file_fails(tmp_path, capsys):
    code = main(
        ["ingest", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]
    )
    assert code == EXIT_FAILURE
    assert "dataset_path" in capsys.readouterr().err


def test_cli_requires_a_subcommand(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main([])
    assert excinfo.value.code == EXIT_USAGE
    capsys.readouterr()


def test_cli_run_report_replay_roundtrip(tmp_path, cli_config_path, capsys):
    out_dir = tmp_path / "run"
    code = main(["run", "--config", str(cli_config_path), "--out-dir", str(out_dir)])
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "done; artifacts under" in printed
    assert "mean accuracy by task:" in printed
    for name in ["config.json", "aggregate.json", "accuracy.csv", "table.txt"]:
        assert (out_dir / name).exists()

    assert main(["report", "--run-dir", str(out_dir)]) == EXIT_OK
    table = capsys.readouterr().out
    assert table == (out_dir / "table.txt").read_text(encoding="utf-8")

    assert main(["replay", "--run-dir", str(out_dir)]) == EXIT_OK
    assert "replay ok" in capsys.readouterr().out

    report_path = out_dir / "seq-0" / "report.json"
    data = json.loads(report_path.read_text(encoding="utf-8"))
    data["accuracy_by_task"][0] = 0.123456
    report_path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n")
    assert main(["replay", "--run-dir", str(out_dir)]) == EXIT_FAILURE
    captured = capsys.readouterr()
    assert "DIFFERS" in captured.out
    assert "replay FAILED" in captured.err


def test_cli_run_flag_overrides_reach_the_report(tmp_path, cli_config_path, capsys):
    out_dir = tmp_path / "run"
    code = main(
        [
            "run",
            "--config", str(cli_config_path),
            "--seed", "21",
            "--memory-size", "1",
            "--out-dir", str(out_dir),
        ]
    )
    assert code == EXIT_OK
    capsys.readouterr()
    echoed = json.loads((out_dir / "config.json").read_text(encoding="utf-8"))
    assert echoed["seed"] == 21
    assert echoed["memory_size"] == 1


def test_cli_run_remote_backend_without_url_fails(cli_config_path, tmp_path, capsys):
    code = main(
        [
            "run",
            "--config", str(cli_config_path),
            "--backend", "remote",
            "--out-dir", str(tmp_path / "r"),
        ]
    )
    assert code == EXIT_FAILURE
    assert "config.backend_url" in capsys.readouterr().err


def test_cli_run_invalid_field_is_usage_error(cli_config_path, tmp_path, capsys):
    code = main(
        [
            "run",
            "--config", str(cli_config_path),
            "--set", "train_cap=0",
            "--out-dir", str(tmp_path / "r"),
        ]
    )
    assert code == EXIT_USAGE
    assert "train_cap" in capsys.readouterr().err


def test_cli_run_bad_override_is_usage_error(cli_config_path, tmp_path, capsys):
    code = main(
        [
            "run",
            "--config", str(cli_config_path),
            "--set", "oops",
            "--out-dir", str(tmp_path / "r"),
        ]
    )
    assert code == EXIT_USAGE
    assert "key=value" in capsys.readouterr().err


def test_cli_run_missing_config_file_fails(tmp_path, capsys):
    code = main(["run", "--config", str(tmp_path / "absent.yaml")])
    assert code == EXIT_FAILURE
    assert "absent.yaml" in capsys.readouterr().err


def test_cli_run_failure_surfaces_job_error(tmp_path, capsys):
    code = main(
        [
            "run",
            "--set", f"dataset_path={tmp_path / 'missing.jsonl'}",
            "--out-dir", str(tmp_path / "doomed"),
        ]
    )
    assert code == EXIT_FAILURE
    assert "FAILED" in capsys.readouterr().err


def test_cli_ablate_selected_flag(tmp_path, cli_config_path, capsys):
    out_dir = tmp_path / "ablate"
    code = main(
        [
            "ablate",
            "--config", str(cli_config_path),
            "--flags", "no_positive",
            "--out-dir", str(out_dir),
        ]
    )
    assert code == EXIT_OK
    printed = capsys.readouterr().out
    assert "full" in printed
    assert "no_positive" in printed
    assert (out_dir / "comparison.txt").exists()


def test_cli_ablate_unknown_flag_fails(tmp_path, cli_config_path, capsys):
    code = main(
        [
            "ablate",
            "--config", str(cli_config_path),
            "--flags", "bogus",
            "--out-dir", str(tmp_path / "a"),
        ]
    )
    assert code == EXIT_FAILURE
    err = capsys.readouterr().err
    assert "bogus" in err
    assert "no_hard_split" in err


def test_cli_status_unknown_job_fails(capsys):
    code = main(["status", "run-4242"])
    assert code == EXIT_FAILURE
    assert "run-4242" in capsys.readouterr().err
