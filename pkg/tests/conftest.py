import numpy as np
import pytest

from wedgefill.core.config import parse_config
from wedgefill.tomo.geometry import AngleMask, ScanGeometry

# Tiny end-to-end configuration: 16x16 phantoms, 30 angles of 6 deg, 8 diffusion steps
TINY_CONFIG = """
[dataset]
train_count = 4
test_count = 2
seed = 7
scenarios_deg = 60, 90, 120

[geometry]
image_size = 16
num_angles = 30
angle_step_deg = 6.0
detector_bins = 24

[schedule]
T = 8

[train.score]
iterations = 6
batch_size = 2
hidden_channels = 4
log_every = 2

[train.distill]
iterations = 6
batch_size = 2
hidden_channels = 4
pair_count = 4
pair_batch = 2
direct_iterations = 4
log_every = 2

[train.postproc]
iterations = 4
batch_size = 2
hidden_channels = 4
ensemble_size = 2
log_every = 2

[eval]
runs = 2
ensemble_size = 2
tv_iterations = 20
"""


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run tests marked slow")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains networks or runs the CLI end to end")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def small_geometry():
    """32x32 images, 60 angles of 3 deg"""
    return ScanGeometry(image_size=32, num_angles=60, angle_step_deg=3.0, detector_bins=48)


@pytest.fixture
def tiny_geometry():
    return ScanGeometry(image_size=16, num_angles=30, angle_step_deg=6.0, detector_bins=24)


@pytest.fixture
def wedge_mask(small_geometry):
    """60 deg missing at the end of the scan"""
    return AngleMask.trailing(small_geometry, 60.0)


@pytest.fixture
def tiny_config():
    return parse_config(TINY_CONFIG, source="tiny")


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG, encoding="utf-8")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
