import numpy as np
import pytest

from mpfc.terminal_set import synthesize


@pytest.fixture(scope="session")
def terminal():
    return synthesize()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
