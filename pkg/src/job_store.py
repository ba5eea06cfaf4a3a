"""Redis-backed state for estimation and simulation jobs, shared by the API and the workers."""

import json
import time
from typing import Any

import redis

from .settings import settings

TERMINAL = {"completed", "failed"}


def derive_status(items: list[dict[str, Any]]) -> tuple[str, str]:
    """Aggregate item states into a job status and message."""
    if not items:
        return "failed", "Nothing to run."

    total = len(items)
    completed = sum(1 for i in items if i.get("status") == "completed")
    failed = sum(1 for i in items if i.get("status") == "failed")
    processing = sum(1 for i in items if i.get("status") == "processing")
    queued = sum(1 for i in items if i.get("status") == "queued")

    if completed == total:
        return "completed", f"All tasks completed ({completed}/{total})."
    if failed > 0 and processing == 0 and queued == 0:
        return "failed", f"{failed} task(s) failed ({completed}/{total} succeeded)."
    if processing > 0:
        return "processing", f"Running {processing}/{total}. Completed {completed}."
    return "queued", f"Waiting to run {queued}/{total}."


class JobStore:
    """Persist job + item state in Redis so workers and API share progress."""

    def __init__(self, redis_url: str | None = None, client: Any = None):
        self.redis_url = redis_url or settings.REDIS_URL
        # from_url does not connect until the first command
        self.client = client if client is not None else redis.from_url(self.redis_url, decode_responses=True)

    def _key(self, job_id: str) -> str:
        return f"job:{job_id}"

    def create_job(self, job_id: str, kind: str, items: list[dict[str, Any]]) -> dict[str, Any]:
        job = {
            "job_id": job_id,
            "kind": kind,
            "status": "queued",
            "message": "Queued",
            "items": items,
            "artifacts": [],
            "created_at": time.time(),
        }
        self._save(job)
        return job

    def get_job(self, job_id: str) -> dict[str, Any] | None:
        raw = self.client.get(self._key(job_id))
        if raw is None:
            return None
        return json.loads(raw)

    def update_item(self, job_id: str, item_id: str, **fields: Any) -> dict[str, Any] | None:
        job = self.get_job(job_id)
        if not job:
            return None

        item = next((i for i in job["items"] if i["item_id"] == item_id), None)
        if item is None:
            return None
        item.update({k: v for k, v in fields.items() if v is not None})

        job["status"], job["message"] = derive_status(job["items"])
        self._save(job)
        return job

    def add_artifact(self, job_id: str, name: str, path: str) -> dict[str, Any] | None:
        """Register a downloadable output file for the job."""
        job = self.get_job(job_id)
        if not job:
            return None
        job["artifacts"] = [a for a in job["artifacts"] if a["name"] != name]
        job["artifacts"].append({"name": name, "path": path, "download_url": f"/api/download/{job_id}/{name}"})
        self._save(job)
        return job

    def artifact_path(self, job_id: str, name: str) -> str | None:
        job = self.get_job(job_id)
        if not job:
            return None
        return next((a["path"] for a in job.get("artifacts", []) if a["name"] == name), None)

    def _save(self, job: dict[str, Any]) -> None:
        self.client.set(self._key(job["job_id"]), json.dumps(job))


job_store = JobStore()
