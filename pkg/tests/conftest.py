import os
import sys

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _no_seed_env(monkeypatch):
    # the CLI reads GPR_SEED; keep the developer's shell from leaking into tests
    monkeypatch.delenv("GPR_SEED", raising=False)
