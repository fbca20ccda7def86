
import numpy as np
import pytest

from helpers import static_profile


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def static():
    return static_profile()
