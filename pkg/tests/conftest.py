"""Shared fixtures: tiny datasets and model configs sized for fast tests."""

import numpy as np
import pytest

from taildistill.data import LongTailedDataset, make_synthetic_longtail
from taildistill.models import ModelConfig


@pytest.fixture(scope="session")
def tiny_pair():
    """A 4-class imbalanced train/test pair, 8x8 images, small enough for seconds-long runs."""
    return make_synthetic_longtail(
        num_classes=4, n_max=16, imbalance_factor=8.0,
        image_size=8, seed=3, test_per_class=10,
        noise_sigma=0.15, shift_range=1,
    )


@pytest.fixture(scope="session")
def tiny_train(tiny_pair):
    return tiny_pair[0]


@pytest.fixture(scope="session")
def tiny_test(tiny_pair):
    return tiny_pair[1]


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        num_classes=4, image_size=8, conv_channels=(8, 8), norm_groups=4, proj_dim=8,
    )


@pytest.fixture
def handmade_dataset():
    """Three classes with counts 4/2/1 built directly from arrays."""
    rng = np.random.default_rng(42)
    labels = np.array([0, 0, 0, 0, 1, 1, 2], dtype=np.int64)
    return LongTailedDataset(
        images=rng.uniform(0.0, 1.0, size=(7, 4, 4, 1)).astype(np.float32),
        labels=labels,
        instance_ids=np.arange(10, 17, dtype=np.int64),
        class_counts=np.array([4, 2, 1], dtype=np.int64),
        split_tags=("few", "few", "few"),
    )
