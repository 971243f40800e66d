import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def derived():
    with open(FIXTURES / "derived.json") as fh:
        return json.load(fh)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
