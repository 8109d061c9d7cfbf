import os

import numpy as np
import pytest
import torch

from compseg.config import ModelConfig, SyntheticSpec, TrainingConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long directional reproduction runs (set COMPSEG_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("COMPSEG_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set COMPSEG_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def tiny_model():
    return ModelConfig(image_size=16, encoder_widths=(8, 16), feature_dim=16, head_widths=(8, 8), weak_widths=(8, 8))


@pytest.fixture
def tiny_training(tiny_model):
    def make(**kwargs):
        params = dict(
            model=tiny_model,
            batch_size=8,
            epochs=1,
            pretrain_epochs=1,
            n_kernels=4,
            kmeans_max_iters=20,
            kmeans_samples_per_image=10,
            learning_rate=1e-3,
        )
        params.update(kwargs)
        return TrainingConfig(**params)
    return make


@pytest.fixture
def small_spec():
    # 64 px keeps every nested ring at least one pixel wide
    return SyntheticSpec(volumes=6, slice_count=16, image_size=64, tumour_probability=1.0, seed=3)


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(volumes=5, slice_count=8, image_size=16, tumour_probability=1.0, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)
