"""Celery tasks: one estimation job per uploaded CSV, Monte Carlo replications in chunks."""

from dataclasses import asdict
from pathlib import Path
from shutil import rmtree

from celery import chord
from celery.utils.log import get_task_logger

from .celery_app import celery_app
from .cli import RunConfig
from .core import load_dataset_csv, validate_dataset
from .errors import ExaminerIVError
from .job_store import TERMINAL, job_store
from .pipeline import ExaminerIVPipeline, PipelineConfig
from .settings import settings
from .sim import DgpConfig, McSummary, ReplicationResult, run_replication

logger = get_task_logger(__name__)


@celery_app.task(name="run_estimate_job")
def run_estimate_job(job_id: str, item_id: str, upload_path: str, config_json: str) -> None:
    """Estimate on one uploaded CSV and register the report files as job artifacts."""
    upload = Path(upload_path)
    results_dir = settings.RESULTS_DIR / job_id

    try:
        job_store.update_item(job_id, item_id, status="processing", message="Validating data...")
        config = RunConfig.model_validate_json(config_json)
        d = load_dataset_csv(upload)
        report = validate_dataset(d)
        if not report.ok:
            job_store.update_item(job_id, item_id, status="failed", message="; ".join(report.messages()[:10]))
            return

        job_store.update_item(job_id, item_id, message=f"Fitting {', '.join(config.estimators)}...")
        result = ExaminerIVPipeline(config.pipeline(), seed=config.seed).estimate(d, config.estimators)

        results_dir.mkdir(parents=True, exist_ok=True)
        for method, est in result.reports.items():
            path = results_dir / f"estimate_{method}.json"
            path.write_text(est.to_json(), encoding="utf-8")
            job_store.add_artifact(job_id, path.name, str(path))
        if result.nuisance is not None:
            path = results_dir / "observations.csv"
            result.observation_frame().to_csv(path, index=False)
            job_store.add_artifact(job_id, path.name, str(path))

        job_store.update_item(job_id, item_id, status="completed", message="Estimation complete!")

    except ExaminerIVError as exc:
        logger.warning("job %s failed: %s", job_id, exc)
        job_store.update_item(job_id, item_id, status="failed", message=str(exc))
    except Exception as exc:  # pragma: no cover - keep the worker alive
        logger.exception("job %s crashed", job_id)
        job_store.update_item(job_id, item_id, status="failed", message=str(exc))
    finally:
        if upload.exists():
            upload.unlink()
        _maybe_cleanup_job_dirs(job_id)


@celery_app.task(name="run_replication_chunk")
def run_replication_chunk(
    dgp_json: str,
    pipeline_json: str,
    estimators: list[str],
    seed: int,
    reps: list[int],
    job_id: str | None = None,
    item_id: str | None = None,
) -> list[dict]:
    """Run replications `reps`; returns plain dicts so results travel as JSON.

    A crash inside the chunk marks the item failed and returns one error row per
    (replication, estimator), so the chord callback still runs.
    """
    if job_id:
        job_store.update_item(job_id, item_id, status="processing", message=f"Replications {reps[0]}..{reps[-1]}")
    try:
        config = DgpConfig.model_validate_json(dgp_json)
        pipeline = PipelineConfig.model_validate_json(pipeline_json)
        rows = [asdict(r) for rep in reps for r in run_replication(config, rep, estimators, seed, pipeline)]
    except Exception as exc:
        logger.exception("replications %s crashed", reps)
        error = f"{type(exc).__name__}: {exc}"
        if job_id:
            job_store.update_item(job_id, item_id, status="failed", message=error)
        return [asdict(ReplicationResult(rep, method, error=error)) for rep in reps for method in estimators]
    if job_id:
        failures = sum(1 for r in rows if r["error"])
        job_store.update_item(job_id, item_id, status="completed", message=f"{len(rows)} estimates, {failures} failed")
    return rows


@celery_app.task(name="summarize_simulation")
def summarize_simulation(chunks: list[list[dict]], job_id: str, dgp_json: str, item_id: str) -> None:
    """Chord callback: aggregate every chunk and write the summary artifacts."""
    try:
        config = DgpConfig.model_validate_json(dgp_json)
        summary = McSummary(config, [ReplicationResult(**row) for chunk in chunks for row in chunk])
        results_dir = settings.RESULTS_DIR / job_id
        results_dir.mkdir(parents=True, exist_ok=True)
        csv_path = results_dir / "summary.csv"
        json_path = results_dir / "summary.json"
        summary.to_frame().to_csv(csv_path, index=False)
        json_path.write_text(summary.to_json(), encoding="utf-8")
        for path in (csv_path, json_path):
            job_store.add_artifact(job_id, path.name, str(path))
        job_store.update_item(job_id, item_id, status="completed", message="Summary written.")
    except Exception as exc:  # pragma: no cover - keep the worker alive
        logger.exception("summary for %s crashed", job_id)
        job_store.update_item(job_id, item_id, status="failed", message=str(exc))


@celery_app.task(name="fail_simulation_summary")
def fail_simulation_summary(request, exc, traceback, job_id: str, item_id: str) -> None:
    """Chord error callback: the summary will never run, so mark its item failed."""
    logger.error("simulation %s aborted: %r", job_id, exc)
    job_store.update_item(job_id, item_id, status="failed", message=f"Replications aborted: {exc}")


def chunk_items(R: int, chunk_size: int) -> list[dict]:
    """Job items for replications 0..R-1 in chunks, plus the summary item."""
    items = []
    for start in range(0, R, chunk_size):
        reps = list(range(start, min(start + chunk_size, R)))
        items.append({"item_id": f"reps-{reps[0]}-{reps[-1]}", "reps": reps, "status": "queued", "message": "Queued"})
    items.append({"item_id": "summary", "reps": [], "status": "queued", "message": "Waiting for replications"})
    return items


def enqueue_simulation(job_id: str, config: RunConfig, items: list[dict]) -> None:
    """Fan replication chunks out to the workers with a summary callback."""
    dgp_json = config.dgp.model_dump_json()
    pipeline_json = config.pipeline().model_dump_json()
    header = [
        run_replication_chunk.s(dgp_json, pipeline_json, config.estimators, config.seed, item["reps"], job_id, item["item_id"])
        for item in items
        if item["reps"]
    ]
    body = summarize_simulation.s(job_id, dgp_json, "summary")
    body.link_error(fail_simulation_summary.s(job_id=job_id, item_id="summary"))
    chord(header)(body)


def _maybe_cleanup_job_dirs(job_id: str) -> None:
    """Remove the per-job upload folder once all items are finished."""
    job = job_store.get_job(job_id)
    if not job:
        return

    items = job.get("items", [])
    if items and all(i.get("status") in TERMINAL for i in items):
        path = settings.UPLOAD_DIR / job_id
        if path.exists():
            rmtree(path, ignore_errors=True)
