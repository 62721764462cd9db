import numpy as np
import pytest

from resattn.tensor import clear_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    clear_tape()
    yield
    clear_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
