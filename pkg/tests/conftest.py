import os
import sys
from pathlib import Path

import pytest

os.environ.pop("AMFM_SEED", None)
os.environ.setdefault("AMFM_LOG_LEVEL", "WARNING")

PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training checks")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long training run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)
