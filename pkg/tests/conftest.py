from __future__ import annotations

import numpy as np
import pytest

from shopagent.bc import generate_demos
from shopagent.environment import GoalStream, build_vocabulary, generate_catalog
from shopagent.model import PolicyModel


@pytest.fixture(scope="session")
def catalog():
    return generate_catalog(1, 50, 5)


@pytest.fixture(scope="session")
def vocab(catalog):
    return build_vocabulary(catalog)


@pytest.fixture(scope="session")
def small_catalog():
    return generate_catalog(3, 10, 2)


@pytest.fixture(scope="session")
def small_vocab(small_catalog):
    return build_vocabulary(small_catalog)


@pytest.fixture(scope="session")
def model(vocab):
    return PolicyModel.initialize(vocab, 0, hidden=16)


@pytest.fixture(scope="session")
def model64(vocab):
    """Float64 copy with enlarged weights so gradients are not vanishingly small."""
    base = PolicyModel.initialize(vocab, 5, hidden=8, dtype=np.float64)
    return base.with_params({k: v * 6.0 for k, v in base.params.items()})


@pytest.fixture(scope="session")
def goals(catalog):
    return GoalStream(catalog, 77, "test").take(40)


@pytest.fixture(scope="session")
def demos(catalog):
    return generate_demos(catalog, 30, seed=11)
