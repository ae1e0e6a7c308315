import os

import numpy as np
import pytest

from models import RunConfig, SynthSpec
from tools.data_io import generate_synthetic
from tools.numerics import Tensor, set_default_dtype, tensor_sum

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")


@pytest.fixture(autouse=True)
def float64_and_clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith("MLVTG_"):
            monkeypatch.delenv(key)
    set_default_dtype(np.float64)
    yield
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec():
    return SynthSpec(
        n_samples=6,
        video_len=(8, 12),
        query_len=(3, 5),
        video_dim=6,
        query_dim=5,
        concept_dim=3,
        seed=7,
    )


@pytest.fixture
def tiny_samples(tiny_spec):
    return generate_synthetic(tiny_spec)


@pytest.fixture
def tiny_config():
    return RunConfig(
        d_model=8,
        d_inner=16,
        num_blocks=2,
        ssm_state=4,
        max_len=32,
        video_dim=6,
        query_dim=5,
        d_llm=16,
        dropout=0.0,
        batch_size=4,
        epochs=1,
        learning_rate=5e-3,
        seed=3,
    )


def weighted_sum(tensor, weights):
    """Scalar <tensor, weights> used by the gradient checks"""
    return tensor_sum(tensor * Tensor(weights))
