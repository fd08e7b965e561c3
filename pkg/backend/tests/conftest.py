import numpy as np
import pytest
import torch

from app.config import ExperimentConfig
from app.embedding_service import GapSpace
from app.metrics import registered_adherence_metrics, unregister_adherence_metric
from app.numerics import precision

from tests.factories import tiny_experiment


@pytest.fixture
def tiny_config() -> ExperimentConfig:
    return tiny_experiment()


@pytest.fixture
def space(tiny_config) -> GapSpace:
    return GapSpace(tiny_config.gap, tiny_config.synth)


@pytest.fixture
def generator() -> torch.Generator:
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """Build and run everything inside the test in double precision"""
    with precision(torch.float64):
        yield


@pytest.fixture
def clean_registry():
    yield
    for name in registered_adherence_metrics():
        unregister_adherence_metric(name)
