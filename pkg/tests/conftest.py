import numpy as np
import pytest

from app import synthetic
from app import tensor as T


@pytest.fixture(autouse=True)
def wide_precision():
    """Gradient and oracle checks only make sense in 64-bit."""
    previous = T.current_precision()
    T.set_default_precision("float64")
    yield
    T.set_default_precision(previous)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy2():
    """Two-conv toy net on 8x8x3 inputs, taps conv1 (8x8x6) and conv2 (8x8x8)."""
    return synthetic.toy_cnn("2conv", seed=0, size=8)
