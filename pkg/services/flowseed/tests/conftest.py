import sys
from pathlib import Path

import numpy as np
import pytest

# Modules are imported flat, like the service entry point does
sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from arm import JointConfig, RobotSpec  # noqa: E402
from dataset import SplitSpec, FamilySpec, generate_dataset  # noqa: E402
from logging_utils import StructuredLogHandler  # noqa: E402
from paths import WorkspacePaths  # noqa: E402


@pytest.fixture
def robot():
    return RobotSpec()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def start_goal():
    return JointConfig([0.3, -0.6, 0.9]), JointConfig([1.8, 0.4, -0.7])


@pytest.fixture
def workspace(tmp_path):
    return WorkspacePaths(tmp_path / "workspace")


@pytest.fixture
def job_logger(tmp_path):
    logger = StructuredLogHandler(tmp_path / "test.log", console=False)
    yield logger
    logger.close()


def small_spec(**overrides) -> SplitSpec:
    """Few sparse problems with short trajectories."""
    base = dict(
        seen_families=[FamilySpec(name="sparse", count_range=(1, 2), radius_range=(0.05, 0.07))],
        unseen_families=[FamilySpec(name="crowded", count_range=(3, 3), radius_range=(0.08, 0.09))],
        counts={"train": 3, "val-seen": 2, "val-unseen": 1},
        cameras={"train": 2, "val-seen": 1, "val-unseen": 1},
        n_points=32,
        n_waypoints=12,
    )
    base.update(overrides)
    return SplitSpec(**base)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    manifest = generate_dataset(small_spec(), root, seed=7, max_workers=2)
    return root, manifest
