#!/usr/bin/env python3
"""
Shared pytest setup: puts src/ on the path, seeded fixtures, `slow` marker
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent / 'src'))

import numpy as np  # noqa: E402
import pytest  # noqa: E402
import torch  # noqa: E402


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the long overfit and ablation acceptance runs')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long-running acceptance run (needs --runslow)')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def tiny_config():
    """Desk config shrunk to 32x32 scenes so a few iterations run in seconds"""
    from pipeline.config import load_config

    return load_config(overrides={
        'data.width': 32, 'data.height': 32, 'data.crop_hw': [32, 32], 'data.num_scenes': 2,
        'data.disparity_range': [1, 8], 'data.num_objects': 2,
        'stereo.d_max': 8, 'encoder.channels': [4, 8, 8, 16],
        'train.iterations': 3, 'train.eval_every': 0, 'train.checkpoint_every': 0,
        'train.log_every': 1,
    }, use_env=False)
