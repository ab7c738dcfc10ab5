import numpy as np
import pytest

from core.experiment_setup import generate_models
from training.trainer import TrainConfig
from utils.log_main import logger


@pytest.fixture(autouse=True)
def _quiet_logger():
    # Tests run without setup_logging; keep records out of the root handlers
    logger.propagate = False
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fast_train():
    """One grid cell and a handful of iterations."""
    return TrainConfig(learning_rates=(1e-2,), weight_decays=(0.0,), iterations=30,
                       batch=32, validation_size=32, tokens=4)


@pytest.fixture
def linear_pair():
    return generate_models("linear", dim=8, depth=2, target_depth=1, seed=0)


@pytest.fixture
def fnn_pair():
    return generate_models("fnn", dim=8, depth=2, target_depth=1, seed=0)


@pytest.fixture
def tfn_pair():
    return generate_models("tfn", dim=4, depth=2, target_depth=2, heads=1, seed=0)
