"""Shared configuration constants for the CLI, the API server and the worker processes."""

from pathlib import Path

from pydantic import Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Project root (one above src/)
PROJECT_ROOT = Path(__file__).resolve().parents[1]


class Settings(BaseSettings):
    """Validated configuration sourced from environment variables."""

    model_config = SettingsConfigDict(
        env_file=PROJECT_ROOT / ".env",
        env_file_encoding="utf-8",
        env_prefix="",
        extra="ignore",
        populate_by_name=True,
    )

    # File system configuration
    DATA_ROOT: Path = Field(PROJECT_ROOT, alias="DATA_ROOT")  # where uploads/results live
    UPLOAD_DIR: Path | None = Field(None, alias="UPLOAD_DIR")
    RESULTS_DIR: Path | None = Field(None, alias="RESULTS_DIR")

    # Upload streaming chunk size (bytes)
    CHUNK_SIZE: int = Field(8 * 1024 * 1024, alias="UPLOAD_CHUNK_SIZE")

    # Estimation defaults
    DEFAULT_FOLDS: int = Field(5, alias="EXIV_FOLDS", ge=2)
    DEFAULT_LEVEL: float = Field(0.95, alias="EXIV_LEVEL", gt=0.0, lt=1.0)
    CLIP_EPS: float = Field(1e-3, alias="EXIV_CLIP_EPS", ge=0.0, lt=0.5)
    WEAK_ID_TOL: float = Field(1e-10, alias="EXIV_WEAK_ID_TOL", gt=0.0)

    # Penalized regression
    CV_FOLDS: int = Field(5, alias="EXIV_CV_FOLDS", ge=2)
    PENALTY_GRID_SIZE: int = Field(50, alias="EXIV_PENALTY_GRID_SIZE", ge=1)
    PENALTY_GRID_RATIO: float = Field(1e-3, alias="EXIV_PENALTY_GRID_RATIO", gt=0.0, lt=1.0)
    LASSO_TOL: float = Field(1e-8, alias="EXIV_LASSO_TOL", gt=0.0)
    LASSO_MAX_SWEEPS: int = Field(10_000, alias="EXIV_LASSO_MAX_SWEEPS", ge=1)

    # Worker count for replications (None = all cores)
    THREADS: int | None = Field(None, alias="EXIV_THREADS")
    LOG_LEVEL: str = Field("info", alias="EXIV_LOG_LEVEL")

    # Redis broker/result backend for Celery and job state
    REDIS_URL: str = Field("redis://localhost:6379/0", alias="REDIS_URL")

    @field_validator("THREADS", mode="before")
    @classmethod
    def _zero_to_none(cls, value):
        """Treat 0 (or '0') as a request to use every core."""
        if value is None:
            return None
        try:
            numeric = int(value)
        except (TypeError, ValueError):
            return value
        return None if numeric <= 0 else numeric

    @field_validator("LOG_LEVEL")
    @classmethod
    def _known_level(cls, value: str) -> str:
        value = value.lower()
        if value not in {"debug", "info", "warning", "error", "fatal"}:
            raise ValueError(f"unknown log level {value!r}")
        return value

    @model_validator(mode="after")
    def derive_paths(self):
        """Fill in path defaults and normalize input to Path instances."""
        data_root = Path(self.DATA_ROOT).resolve()
        self.DATA_ROOT = data_root
        self.UPLOAD_DIR = Path(self.UPLOAD_DIR) if self.UPLOAD_DIR else data_root / "uploads"
        self.RESULTS_DIR = Path(self.RESULTS_DIR) if self.RESULTS_DIR else data_root / "results"
        return self


settings = Settings()
