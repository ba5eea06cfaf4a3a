"""Locally robust examiner-IV estimation: cross-fitted propensities, automatic Riesz representers,
debiased moment solve, baselines, simulation and diagnostics.

The HTTP service lives in `src.main` (`uvicorn src.main:app`); it is not imported here so the
CLI and library do not pull in FastAPI or Celery.
"""

__version__ = "0.1.0"

__all__ = ["__version__"]
