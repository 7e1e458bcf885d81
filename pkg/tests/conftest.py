import numpy as np
import pytest

from cgrpo.models.config import RunConfig, build_config


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config(tmp_path) -> RunConfig:
    """A run small enough to train in well under a second per iteration."""
    return build_config(
        {
            "env": "point_mass",
            "horizon": 20,
            "batch_timesteps": 40,
            "minibatch_size": 16,
            "epochs_per_iter": 1,
            "hidden_size": 8,
            "hidden_layers": 1,
            "n_policies": 2,
            "n_groups": 2,
            "iterations": 4,
            "checkpoint_every": 2,
            "record_wall_time": False,
            "output_dir": str(tmp_path / "run"),
        }
    )
