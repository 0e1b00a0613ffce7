"""
Pytest configuration and fixtures
"""

import pytest
import sys
from pathlib import Path

import numpy as np

# Add project root to path
project_root = Path(__file__).parent.parent.parent
sys.path.insert(0, str(project_root))

from skullmae.schemas import DataConfig, ModelConfig, PhantomConfig, SynthConfig, TrainConfig
from skullmae.volume import VoxelGrid


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="Run desk-scale learning and ablation tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running desk-scale runs (use --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    """Seeded numpy generator for random masks"""
    return np.random.default_rng(1234)


@pytest.fixture
def random_grid():
    """Factory for random VoxelGrids"""
    def make(rng, dims, density=0.3, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        return VoxelGrid(rng.random(tuple(dims)) < density, spacing, origin)
    return make


@pytest.fixture
def box_grid():
    """Factory for a grid holding one solid axis-aligned box"""
    def make(dims, lo, hi, spacing=(1.0, 1.0, 1.0)):
        data = np.zeros(tuple(dims), dtype=bool)
        data[lo[0]:hi[0] + 1, lo[1]:hi[1] + 1, lo[2]:hi[2] + 1] = True
        return VoxelGrid(data, spacing)
    return make


@pytest.fixture
def small_phantom_config():
    """16^3 shells, small enough for fast synthesis and training"""
    return PhantomConfig(dims=(16, 16, 16))


@pytest.fixture
def tiny_train_config(tmp_path, small_phantom_config):
    """Two-level, two-channel model trained for two epochs on three phantoms"""
    return TrainConfig(
        data=DataConfig(phantoms=3, held_out=2, phantom=small_phantom_config),
        synth=SynthConfig(),
        model=ModelConfig(levels=2, base_channels=2),
        epochs=2,
        batch_size=2,
        checkpoint_every=1,
        seed=7,
        out_dir=str(tmp_path / "run"),
    )


@pytest.fixture
def sample_experiment_config():
    """Raw experiment config as written to JSON"""
    return {
        "seed": 3,
        "epochs": 4,
        "synth": {"deform_enabled": False, "patch_count_max": 2},
        "model": {"levels": 2, "base_channels": 4},
        "data": {"phantoms": 5, "held_out": 1, "phantom": {"dims": [16, 16, 16]}},
        "metrics": {"open_radius": 0},
    }
