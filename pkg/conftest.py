import sys
from pathlib import Path

import pytest

# Add the repo root to the path so the flat modules import in tests
sys.path.insert(0, str(Path(__file__).parent))

from dram_core import DramConfig, DramState  # noqa: E402
from pim_engines import PimConfig, PimEngine  # noqa: E402


@pytest.fixture
def dram_cfg():
    return DramConfig()


@pytest.fixture
def dram(dram_cfg):
    return DramState(dram_cfg)


@pytest.fixture
def pim_cfg():
    return PimConfig()


@pytest.fixture
def engine(dram, pim_cfg):
    return PimEngine(dram, pim_cfg)
