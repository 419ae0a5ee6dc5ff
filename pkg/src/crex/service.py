"""HTTP service exposing the engine: ingest, runs, ablation, report, replay.

Long work (runs, ablations) goes through a small thread-backed job store;
callers either wait for completion (the default, fine at desk scale) or
poll ``GET /runs/{job_id}``. Artifacts land on the service host's disk
under the requested output directory.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import threading
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Optional

from fastapi import FastAPI, HTTPException
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import corpus
from .orchestrator import (
    ABLATION_FLAGS,
    RunConfig,
    regenerate_reports,
    replay_run,
    run_ablation_matrix,
    run_all,
)
from .schemas import (
    AblateRequest,
    HealthResponse,
    IngestRequest,
    IngestResponse,
    JobInfo,
    ReplayRequest,
    ReplayResponse,
    ReportRequest,
    ReportResponse,
    RunRequest,
    RunResult,
)

logger = logging.getLogger(__name__)


class JobStore:
    """In-memory registry of background jobs, one worker thread per job."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._jobs: dict[str, JobInfo] = {}
        self._threads: dict[str, threading.Thread] = {}
        self._counter = itertools.count(1)

    def submit(
        self,
        kind: str,
        out_dir: str,
        work: Callable[[], dict],
        wait: bool,
    ) -> JobInfo:
        with self._lock:
            job_id = f"{kind}-{next(self._counter):04d}"
            info = JobInfo(job_id=job_id, kind=kind, status="running", out_dir=out_dir)
            self._jobs[job_id] = info

        def _run() -> None:
            try:
                result = work()
                self._update(job_id, status="done", result=result)
            except Exception as exc:  # job errors surface via the job record
                logger.exception("job %s failed", job_id)
                self._update(job_id, status="failed", error=str(exc))

        if wait:
            _run()
            return self.get(job_id)
        thread = threading.Thread(target=_run, name=job_id, daemon=True)
        with self._lock:
            self._threads[job_id] = thread
        thread.start()
        return self.get(job_id)

    def _update(self, job_id: str, **changes) -> None:
        with self._lock:
            self._jobs[job_id] = self._jobs[job_id].model_copy(update=changes)

    def get(self, job_id: str) -> JobInfo:
        with self._lock:
            if job_id not in self._jobs:
                raise KeyError(job_id)
            return self._jobs[job_id]

    def join(self, job_id: str, timeout: Optional[float] = None) -> None:
        with self._lock:
            thread = self._threads.get(job_id)
        if thread is not None:
            thread.join(timeout)


def _timestamp_slug() -> str:
    return datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")


def build_engine_app(runs_root: str | Path = "runs") -> FastAPI:
    """The engine API. ``runs_root`` holds run directories created when a
    request does not name an output directory explicitly."""
    app = FastAPI(title="continual relation extraction engine")
    jobs = JobStore()
    app.state.jobs = jobs
    runs_root_path = Path(runs_root)

    @app.exception_handler(RequestValidationError)
    async def _validation_error(request, exc: RequestValidationError) -> JSONResponse:
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

    def _resolve_out_dir(requested: Optional[str], kind: str) -> Path:
        if requested:
            return Path(requested)
        return runs_root_path / f"{_timestamp_slug()}-{kind}"

    @app.get("/healthz", response_model=HealthResponse)
    def healthz() -> HealthResponse:
        return HealthResponse()

    @app.post("/ingest", response_model=IngestResponse)
    def ingest(body: IngestRequest) -> IngestResponse:
        try:
            samples = corpus.load_dataset(body.dataset_path, body.dataset_format)
        except FileNotFoundError as exc:
            raise HTTPException(400, f"dataset_path: {exc}")
        except corpus.DatasetError as exc:
            raise HTTPException(400, f"dataset_path: {exc}")
        if not samples:
            raise HTTPException(400, "dataset_path: dataset has no usable records")
        out_path = Path(body.out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        corpus.serialize_samples(samples, out_path)
        digest = hashlib.sha256(out_path.read_bytes()).hexdigest()
        relations = sorted({s.relation for s in samples})
        counts = {r: 0 for r in relations}
        for sample in samples:
            counts[sample.relation] += 1
        manifest = {
            "source": body.dataset_path,
            "format": body.dataset_format,
            "num_samples": len(samples),
            "relations": counts,
            "sha256": digest,
        }
        manifest_path = out_path.with_suffix(out_path.suffix + ".manifest.json")
        manifest_path.write_text(
            json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        return IngestResponse(
            out_path=str(out_path),
            manifest_path=str(manifest_path),
            num_samples=len(samples),
            num_relations=len(relations),
            relations=relations,
            sha256=digest,
        )

    def _check_remote_config(config: RunConfig) -> None:
        if config.backend == "remote" and not config.backend_url:
            raise HTTPException(
                400,
                "config.backend_url: required when backend is 'remote' "
                "(set it to the training service URL)",
            )
        if config.analyst_mode == "remote" and not config.analyst_url:
            raise HTTPException(
                400,
                "config.analyst_url: required when analyst_mode is 'remote'",
            )

    @app.post("/runs", response_model=JobInfo)
    def start_run(body: RunRequest) -> JobInfo:
        _check_remote_config(body.config)
        out_dir = _resolve_out_dir(body.out_dir or body.config.out_dir, "run")

        def work() -> dict:
            reports, aggregate = run_all(body.config, out_dir)
            return RunResult(
                out_dir=str(out_dir),
                aggregate=aggregate,
                accuracy_by_sequence={
                    str(r.sequence_seed): list(r.accuracy_by_task) for r in reports
                },
            ).model_dump()

        return jobs.submit("run", str(out_dir), work, body.wait)

    @app.post("/ablate", response_model=JobInfo)
    def start_ablation(body: AblateRequest) -> JobInfo:
        _check_remote_config(body.config)
        out_dir = _resolve_out_dir(body.out_dir or body.config.out_dir, "ablate")
        if body.flags is not None:
            unknown = [f for f in body.flags if f not in ABLATION_FLAGS]
            if unknown:
                raise HTTPException(
                    400,
                    f"flags: unknown ablation flags {unknown}; "
                    f"choose from {list(ABLATION_FLAGS)}",
                )

        def work() -> dict:
            comparison = run_ablation_matrix(body.config, out_dir, body.flags)
            return {"out_dir": str(out_dir), "comparison": comparison}

        return jobs.submit("ablate", str(out_dir), work, body.wait)

    @app.get("/runs/{job_id}", response_model=JobInfo)
    def get_job(job_id: str) -> JobInfo:
        try:
            return jobs.get(job_id)
        except KeyError:
            raise HTTPException(404, f"unknown job {job_id!r}")

    @app.post("/report", response_model=ReportResponse)
    def report(body: ReportRequest) -> ReportResponse:
        try:
            aggregate, table = regenerate_reports(Path(body.run_dir))
        except FileNotFoundError as exc:
            raise HTTPException(404, f"run_dir: {exc}")
        return ReportResponse(run_dir=body.run_dir, aggregate=aggregate, table=table)

    @app.post("/replay", response_model=ReplayResponse)
    def replay(body: ReplayRequest) -> ReplayResponse:
        run_dir = Path(body.run_dir)
        if not (run_dir / "config.json").exists():
            raise HTTPException(404, f"run_dir: no config.json under {run_dir}")
        ok, messages = replay_run(run_dir)
        return ReplayResponse(ok=ok, messages=messages)

    return app
