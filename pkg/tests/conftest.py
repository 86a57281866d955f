import numpy as np
import pytest

from flowup.synthesis import gen_sample
from flowup.tensor import default_dtype


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    """Run the test body with 64-bit default tensors."""
    with default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_dataset():
    """Eight 64x64 scenes as (image, flow) pairs."""
    return [(s.image, s.flow) for s in (gen_sample(i, 64, 64, 3) for i in range(8))]
