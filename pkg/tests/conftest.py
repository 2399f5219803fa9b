import numpy as np
import pytest

from mvsgru import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _reset_dtype():
    """Tests that flip the global numeric mode must not leak it."""
    yield
    T.set_default_dtype(np.float32)
