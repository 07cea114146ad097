"""
Shared fixtures for the MoSARe test suite
"""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))
os.environ.setdefault('TF_CPP_MIN_LOG_LEVEL', '2')

from services.data_service import generate_synthetic  # noqa: E402
from tests.helpers import small_config, small_spec  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run multi-seed trend tests')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow') or os.environ.get('MOSARE_RUN_SLOW') == '1':
        return
    skip_slow = pytest.mark.skip(reason='trend test: use --runslow or MOSARE_RUN_SLOW=1')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def dataset():
    return generate_synthetic(small_spec())


@pytest.fixture
def raw_dataset():
    return generate_synthetic(small_spec(n_patches=6, n_genes=12, n_sentences=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
