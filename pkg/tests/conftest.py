import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

logging.getLogger("driftfl").setLevel(logging.ERROR)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_task():
    """The 5-class Gaussian-blob task used by most integration tests."""
    from driftfl import rng as rngmod
    from driftfl import shift
    return shift.make_task(5, 10, 2.0, 1.0, rngmod.stream(777, "task"))


@pytest.fixture(scope="session")
def fixture_model(fixture_task):
    """A model pretrained on the fixture task's uniform prior."""
    from driftfl import federation as fed
    from driftfl import rng as rngmod
    from driftfl import shift
    prior = shift.pretrain_prior("uniform", fixture_task.num_classes)
    return fed.pretrain(fixture_task, prior, 4000, 300, 0.5,
                        rngmod.stream(777, "server", "pretrain"),
                        hidden_dim=16)
