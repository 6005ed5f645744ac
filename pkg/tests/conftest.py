import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

MNIST_DIR = os.environ.get("METRIC_OOD_MNIST_DIR", "/root/data/mnist")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_err(a, b):
    """Elementwise |a-b| / (|a| + |b| + 1e-8)."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / (np.abs(a) + np.abs(b) + 1e-8)
