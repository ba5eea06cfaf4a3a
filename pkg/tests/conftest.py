"""Shared fixtures: small datasets, simulated draws and an in-memory job store client."""

import numpy as np
import pytest

from src.core import Dataset
from src.learners import LearnerConfig
from src.pipeline import PipelineConfig
from src.sim import DgpConfig, draw_dgp


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run Monte Carlo tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def toy_dataset():
    return Dataset(
        y=[1.0, 0.0, 1.0, 0.0],
        t=[1.0, 0.0, 1.0, 0.0],
        x=None,
        z=[1, 1, 2, 2],
    )


@pytest.fixture
def small_config():
    return DgpConfig(n=600, J=6, S=2, p=8, s_sparse=3, seed=11)


@pytest.fixture
def small_draw(small_config):
    return draw_dgp(small_config)


@pytest.fixture
def fixed_pipeline():
    """Fixed penalties keep fits fast and make results independent of CV seeds."""
    lasso = LearnerConfig(method="lasso", penalty=0.02)
    return PipelineConfig(folds=3, learner=lasso, riesz=lasso, clip_eps=1e-3)


class MemoryRedis:
    """get/set subset of the redis client used by JobStore."""

    def __init__(self):
        self.data = {}

    def get(self, key):
        return self.data.get(key)

    def set(self, key, value):
        self.data[key] = value
        return True


@pytest.fixture
def memory_store(monkeypatch):
    from src import job_store as job_store_module
    from src import tasks

    store = job_store_module.JobStore(client=MemoryRedis())
    monkeypatch.setattr(job_store_module, "job_store", store)
    monkeypatch.setattr(tasks, "job_store", store)
    return store


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
