import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_kernel(rng, size):
    """Nonnegative normalized kernel of odd size."""
    k = rng.random((size, size))
    return k / k.sum()


@pytest.fixture
def make_kernel(rng):
    def _make(size=5):
        return random_kernel(rng, size)
    return _make
