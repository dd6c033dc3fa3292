import numpy as np
import pytest


def ulps_apart(a, b):
    """Distance between two floats in units of the larger one's spacing."""
    a = np.asarray(a)
    b = np.asarray(b)
    spacing = np.spacing(np.maximum(np.abs(a), np.abs(b)))
    return np.abs(a.astype(np.float64) - b.astype(np.float64)) / spacing


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
