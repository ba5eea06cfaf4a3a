"""FastAPI app: submit estimation and simulation jobs, poll their status, download outputs."""

import json
import uuid
from typing import Any

from fastapi import Body, FastAPI, File, Form, HTTPException, UploadFile
from fastapi.responses import FileResponse
from pydantic import ValidationError

from .cli import RunConfig
from .job_store import job_store
from .settings import settings
from .tasks import chunk_items, enqueue_simulation, run_estimate_job

app = FastAPI(title="examiner-iv")

# Shared with the Celery worker
for directory in (settings.UPLOAD_DIR, settings.RESULTS_DIR):
    directory.mkdir(parents=True, exist_ok=True)


def _run_config(values: dict[str, Any], mode: str) -> RunConfig:
    try:
        return RunConfig.model_validate({**values, "mode": mode})
    except ValidationError as exc:
        raise HTTPException(status_code=422, detail=exc.errors(include_url=False, include_context=False)) from exc


@app.post("/api/estimate")
async def submit_estimate(file: UploadFile = File(...), config: str = Form("{}")) -> dict[str, Any]:
    """Accept a case-level CSV plus an optional JSON run config and enqueue the estimation."""
    try:
        values = json.loads(config) if config.strip() else {}
    except json.JSONDecodeError as exc:
        raise HTTPException(status_code=422, detail=f"config is not valid JSON: {exc}") from exc

    job_id = str(uuid.uuid4())
    upload_dir = settings.UPLOAD_DIR / job_id
    upload_dir.mkdir(parents=True, exist_ok=True)
    filename = file.filename or "cases.csv"
    destination = upload_dir / filename

    with open(destination, "wb") as buffer:  # stream upload to disk in chunks
        while True:
            chunk = file.file.read(settings.CHUNK_SIZE)
            if not chunk:
                break
            buffer.write(chunk)

    run_config = _run_config({**values, "data_path": str(destination)}, "estimate")
    item = {"item_id": "estimate", "filename": filename, "status": "queued", "message": "Queued"}
    job_store.create_job(job_id, "estimate", [item])
    run_estimate_job.delay(job_id, item["item_id"], str(destination), run_config.model_dump_json())
    return {"job_id": job_id, "items": [{"item_id": item["item_id"], "filename": filename}]}


@app.post("/api/simulate")
async def submit_simulation(values: dict[str, Any] = Body(default_factory=dict)) -> dict[str, Any]:
    """Split a Monte Carlo study into replication chunks and enqueue them with a summary step."""
    run_config = _run_config({"dgp": {}, **values}, "simulate")
    job_id = str(uuid.uuid4())
    items = chunk_items(run_config.replications, chunk_size=10)
    job_store.create_job(job_id, "simulate", items)
    enqueue_simulation(job_id, run_config, items)
    return {"job_id": job_id, "items": [{"item_id": i["item_id"]} for i in items]}


@app.get("/api/status/{job_id}")
async def get_status(job_id: str) -> dict[str, Any]:
    """Return the job + item status for a given job id."""
    job = job_store.get_job(job_id)
    if not job:
        raise HTTPException(status_code=404, detail="Job not found")
    return job


@app.get("/api/download/{job_id}/{artifact}")
async def download_artifact(job_id: str, artifact: str) -> FileResponse:
    """Send one output file (report JSON, observation CSV or summary) of a job."""
    job = job_store.get_job(job_id)
    if not job:
        raise HTTPException(status_code=404, detail="Job not found")

    path = job_store.artifact_path(job_id, artifact)
    if not path:
        if job.get("status") not in ("completed", "failed"):
            raise HTTPException(status_code=400, detail="Results not ready")
        raise HTTPException(status_code=404, detail="Artifact not found in job")

    return FileResponse(path, filename=artifact)
