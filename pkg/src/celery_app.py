"""Celery application shared by the API and worker processes."""

from celery import Celery

from .settings import settings

# Single Celery app used by both the FastAPI process (to enqueue) and the worker
celery_app = Celery(
    "examiner_iv",
    broker=settings.REDIS_URL,  # message broker where tasks are queued
    backend=settings.REDIS_URL,  # replication chunks return results through here
)

celery_app.conf.update(
    task_serializer="json",
    accept_content=["json"],
    result_serializer="json",
    timezone="UTC",
    worker_prefetch_multiplier=1,  # replication chunks are long; don't hoard them
)

# Load any @celery_app.task definitions in src
celery_app.autodiscover_tasks(["src"])
