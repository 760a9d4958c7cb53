import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_sparse(rng, d, density=0.35, scale=1.0):
    """Random d x d matrix with a sparse sign pattern and zero diagonal."""
    W = rng.uniform(-scale, scale, size=(d, d)) * (rng.random((d, d)) < density)
    np.fill_diagonal(W, 0.0)
    return W
