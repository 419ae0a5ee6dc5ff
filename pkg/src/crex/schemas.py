"""Request/response models for the engine's HTTP API.

The engine service exposes the pipeline's operations — dataset ingestion,
runs, the ablation matrix, report regeneration, and replay verification —
as JSON endpoints. The CLI is a thin client of these models.
"""

from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from .orchestrator import RunConfig

JobStatus = Literal["running", "done", "failed"]


class HealthResponse(BaseModel):
    status: Literal["ok"] = "ok"


class IngestRequest(BaseModel):
    dataset_path: str = Field(min_length=1)
    dataset_format: str = "tacred-like"
    out_path: str = Field(min_length=1)


class IngestResponse(BaseModel):
    out_path: str
    manifest_path: str
    num_samples: int
    num_relations: int
    relations: List[str]
    sha256: str


class RunRequest(BaseModel):
    config: RunConfig
    out_dir: Optional[str] = None
    # Block until the run finishes (the default: runs are desk-scale) or
    # return immediately with a job id to poll.
    wait: bool = True


class AblateRequest(BaseModel):
    config: RunConfig
    out_dir: Optional[str] = None
    # Subset of ablation flags to run; None means the full matrix.
    flags: Optional[List[str]] = None
    wait: bool = True


class JobInfo(BaseModel):
    job_id: str
    kind: Literal["run", "ablate"]
    status: JobStatus
    out_dir: str
    error: Optional[str] = None
    result: Optional[dict] = None


class ReportRequest(BaseModel):
    run_dir: str = Field(min_length=1)


class ReportResponse(BaseModel):
    run_dir: str
    aggregate: dict
    table: str


class ReplayRequest(BaseModel):
    run_dir: str = Field(min_length=1)


class ReplayResponse(BaseModel):
    ok: bool
    messages: List[str]


class RunResult(BaseModel):
    """The payload stored in JobInfo.result for finished runs."""

    out_dir: str
    aggregate: dict
    accuracy_by_sequence: Dict[str, List[float]]
